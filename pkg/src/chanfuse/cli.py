"""Command-line entry point.

Every subcommand reads an optional ``key = value`` spec file (``--spec``) and
accepts ``--<key> value`` overrides for each spec key, e.g.::

    chanfuse train --spec run.cfg --max_iterations 300 --skip_modes copy
    chanfuse ablate-skip --n_samples 16 --output_dir runs/skip
    chanfuse gradcheck
"""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path
from typing import Optional, Sequence

from .config import ConfigError
from .data import CheckpointError, DataError, generate_synthetic, save_dataset
from .experiments import (
    FIELD_TABLE,
    export_attention,
    load_spec,
    run_eval,
    run_qk_ablation,
    run_single,
    run_skip_ablation,
    write_csv,
)
from .gradcheck import gradcheck, miniature_config
from .tensor import NonFiniteError, corrupt_adjoint
from .training import PretrainedLoadError, TrainingDivergedError

EXIT_OK, EXIT_CONFIG, EXIT_RUNTIME = 0, 1, 2


def _add_spec_options(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--spec", help="key = value experiment file")
    group = parser.add_argument_group("spec overrides")
    for name in sorted(FIELD_TABLE):
        group.add_argument(f"--{name}", dest=f"ov_{name}", metavar="VALUE")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="chanfuse", description=__doc__.split("\n\n")[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="train one configuration and evaluate it")
    _add_spec_options(p)

    p = sub.add_parser("eval", help="evaluate a checkpoint")
    _add_spec_options(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--subset", choices=("val", "train", "all"), default="val")

    p = sub.add_parser("ablate-skip", help="all/none/Li/w-o Li skip-wiring study")
    _add_spec_options(p)

    p = sub.add_parser("ablate-qk", help="query/key level subset study")
    _add_spec_options(p)

    p = sub.add_parser("gradcheck", help="finite-difference check of all adjoints")
    _add_spec_options(p)
    p.add_argument("--samples", type=int, default=256, help="parameter entries to check")
    p.add_argument("--corrupt-op", help="fault injection: scale this op's adjoints by 1.01")

    p = sub.add_parser("export-attn", help="export CCT similarity matrices as CSV")
    _add_spec_options(p)
    p.add_argument("--checkpoint", required=True)

    p = sub.add_parser("gen-data", help="write a synthetic dataset as PGM pairs")
    _add_spec_options(p)
    p.add_argument("--out", required=True, help="destination directory")
    return parser


def _spec(args: argparse.Namespace):
    overrides = {
        key[3:]: value for key, value in vars(args).items() if key.startswith("ov_") and value is not None
    }
    return load_spec(args.spec, overrides)


def _dispatch(args: argparse.Namespace) -> int:
    spec = _spec(args)
    out = Path(spec.output_dir)
    if args.command == "train":
        outcome = run_single(spec)
        print(outcome.report.table())
        print(f"artifacts written to {out}")
    elif args.command == "eval":
        report, path = run_eval(spec, args.checkpoint, args.subset)
        print(report.table())
        print(f"wrote {path}")
    elif args.command == "ablate-skip":
        rows, path = run_skip_ablation(spec)
        for row in rows:
            print(f"{row[0]:<8} dice={row[1]} iou={row[2]}")
        print(f"wrote {path}")
    elif args.command == "ablate-qk":
        rows, path = run_qk_ablation(spec)
        for row in rows:
            print(f"{row[0]:<8} dice={row[1]} iou={row[2]}")
        print(f"wrote {path}")
    elif args.command == "gradcheck":
        config = miniature_config(spec.model)
        if args.corrupt_op:
            with corrupt_adjoint(args.corrupt_op):
                report = gradcheck(config, seed=spec.train.seed, n_samples=args.samples)
        else:
            report = gradcheck(config, seed=spec.train.seed, n_samples=args.samples)
        print(report.summary())
        write_csv(out / "gradcheck.csv", ["kind", "name", "analytic", "numeric", "rel_error"],
                  report.rows(), spec.spec_hash())
        return EXIT_OK if report.passed else EXIT_RUNTIME
    elif args.command == "export-attn":
        summary, paths = export_attention(spec, args.checkpoint)
        for p in paths:
            print(f"wrote {p}")
    elif args.command == "gen-data":
        samples = generate_synthetic(spec.n_samples, spec.model.image_size, spec.data_seed)
        save_dataset(samples, args.out)
        print(f"wrote {len(samples)} samples to {args.out}")
    return EXIT_OK


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        # argparse exits with 2 on bad usage; report it as a configuration error
        return EXIT_CONFIG if exc.code else EXIT_OK
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return _dispatch(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (TrainingDivergedError, NonFiniteError, CheckpointError, DataError,
            PretrainedLoadError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
