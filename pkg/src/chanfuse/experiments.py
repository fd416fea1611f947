"""Experiment specs and the studies driven by the command line."""

from __future__ import annotations

import csv
import dataclasses
import datetime as _dt
import hashlib
import io
import logging
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, fields
from pathlib import Path
from typing import Any, Optional, Sequence

import numpy as np

from .config import ConfigError, ModelConfig, parse_levels
from .data import (
    generate_synthetic,
    load_checkpoint,
    load_checkpoint_config,
    load_dataset,
    save_checkpoint,
    split,
)
from .metrics import MetricsReport, evaluate_masks
from .training import FitResult, TrainConfig, fit, predict
from .unet import SegmentationNet

logger = logging.getLogger(__name__)

SKIP_ABLATION = {
    "all": ("copy",) * 4,
    "none": ("none",) * 4,
    **{f"L{i}": tuple("copy" if j == i else "none" for j in range(1, 5)) for i in range(1, 5)},
    **{f"w/o L{i}": tuple("none" if j == i else "copy" for j in range(1, 5)) for i in range(1, 5)},
}
ABLATION_HEADER = ["config_label", "dice", "iou", "hd", "iterations", "seed"]
CURVE_HEADER = ["iteration", "loss_total", "loss_ce", "loss_dice"]
GENERATED_PREFIX = "# generated="
_UNHASHED = ("output_dir", "workers")


@dataclass
class ExperimentSpec:
    model: ModelConfig = field(default_factory=lambda: ModelConfig(base_channels=8))
    train: TrainConfig = field(default_factory=TrainConfig)
    data: str = "synthetic"  # "synthetic" or a dataset directory
    n_samples: int = 16
    data_seed: int = 0
    binarize: bool = False
    val_fraction: float = 0.25
    output_dir: str = "runs/default"
    study: str = "single"  # single | skip_ablation | qk_ablation
    query_sweep: tuple[str, ...] = ("1", "12", "123", "1234", "234")
    key_sweep: tuple[str, ...] = ("1", "12", "123", "1234")
    workers: int = 1

    def __post_init__(self):
        if self.study not in ("single", "skip_ablation", "qk_ablation"):
            raise ConfigError(f"unknown study {self.study!r}")
        if not 0 <= self.val_fraction < 1:
            raise ConfigError("val_fraction must lie in [0, 1)")
        for sweep in (self.query_sweep, self.key_sweep):
            for entry in sweep:
                if not parse_levels(entry):
                    raise ConfigError(f"empty level subset {entry!r} in sweep")

    # -- flat key/value view ---------------------------------------------

    def as_flat(self) -> dict[str, Any]:
        flat: dict[str, Any] = {}
        flat.update(dataclasses.asdict(self.model))
        flat.update(dataclasses.asdict(self.train))
        for f in fields(self):
            if f.name not in ("model", "train"):
                flat[f.name] = getattr(self, f.name)
        return flat

    def canonical(self) -> str:
        return "\n".join(f"{k} = {_render(v)}" for k, v in sorted(self.as_flat().items()))

    def spec_hash(self) -> str:
        """Digest of every setting that can change results (not where or how parallel they run)."""
        flat = {k: v for k, v in self.as_flat().items() if k not in _UNHASHED}
        text = "\n".join(f"{k} = {_render(v)}" for k, v in sorted(flat.items()))
        return hashlib.sha256(text.encode()).hexdigest()[:16]

    def replace(self, **kw) -> ExperimentSpec:
        flat = self.as_flat()
        flat.update(kw)
        return spec_from_flat(flat)


def _render(value: Any) -> str:
    if isinstance(value, (tuple, list)):
        return ",".join(str(v) for v in value)
    return str(value)


def _field_types() -> dict[str, tuple[str, Any]]:
    table: dict[str, tuple[str, Any]] = {}
    for owner, cls in (("model", ModelConfig), ("train", TrainConfig), ("spec", ExperimentSpec)):
        defaults = cls()
        for f in fields(cls):
            if owner == "spec" and f.name in ("model", "train"):
                continue
            table[f.name] = (owner, getattr(defaults, f.name))
    return table


FIELD_TABLE = _field_types()


def coerce(name: str, raw: Any) -> Any:
    if name not in FIELD_TABLE:
        raise ConfigError(f"unknown spec key {name!r}")
    if not isinstance(raw, str):
        return raw
    default = FIELD_TABLE[name][1]
    text = raw.strip()
    try:
        if isinstance(default, bool):
            if text.lower() in ("1", "true", "yes", "on"):
                return True
            if text.lower() in ("0", "false", "no", "off"):
                return False
            raise ValueError(text)
        if isinstance(default, int):
            return int(text)
        if isinstance(default, float):
            return float(text)
        if isinstance(default, tuple):
            if name in ("query_sweep", "key_sweep"):
                return tuple(t.strip() for t in text.split(",") if t.strip())
            return text
        if default is None:
            return None if text.lower() in ("", "none") else text
        return text
    except ValueError as exc:
        raise ConfigError(f"bad value for {name}: {raw!r}") from exc


def spec_from_flat(flat: dict[str, Any]) -> ExperimentSpec:
    parts: dict[str, dict[str, Any]] = {"model": {}, "train": {}, "spec": {}}
    for key, value in flat.items():
        owner, _ = FIELD_TABLE.get(key, (None, None))
        if owner is None:
            raise ConfigError(f"unknown spec key {key!r}")
        parts[owner][key] = coerce(key, value)
    try:
        model = ModelConfig(**parts["model"])
        train = TrainConfig(**parts["train"])
    except ConfigError:
        raise
    except (TypeError, ValueError) as exc:
        raise ConfigError(str(exc)) from exc
    return ExperimentSpec(model=model, train=train, **parts["spec"])


def parse_spec_text(text: str) -> dict[str, str]:
    """Line-oriented ``key = value`` with ``#`` comments."""
    values: dict[str, str] = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected 'key = value', got {line!r}")
        key, value = (part.strip() for part in line.split("=", 1))
        if key not in FIELD_TABLE:
            raise ConfigError(f"line {lineno}: unknown key {key!r}")
        values[key] = value
    return values


def load_spec(path: Optional[str] = None, overrides: Optional[dict[str, Any]] = None) -> ExperimentSpec:
    flat = ExperimentSpec().as_flat()
    if path is not None:
        flat.update(parse_spec_text(Path(path).read_text()))
    flat.update(overrides or {})
    return spec_from_flat(flat)


# -------------------------------------------------------------------- output


def write_csv(path: Path, header: Sequence[str], rows: Sequence[Sequence], spec_hash: str) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    buf = io.StringIO()
    buf.write(f"# spec_hash={spec_hash}\n")
    buf.write(f"{GENERATED_PREFIX}{_dt.datetime.now(_dt.timezone.utc).isoformat(timespec='seconds')}\n")
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(header)
    writer.writerows(rows)
    path.write_text(buf.getvalue())
    return path


def read_csv_rows(path: Path) -> list[dict[str, str]]:
    lines = [ln for ln in Path(path).read_text().splitlines() if not ln.startswith("#")]
    return list(csv.DictReader(lines))


def _fmt(value: Optional[float]) -> str:
    return "" if value is None else f"{value:.6f}"


# ------------------------------------------------------------------ running


def load_samples(spec: ExperimentSpec):
    if spec.data == "synthetic":
        samples = generate_synthetic(spec.n_samples, spec.model.image_size, spec.data_seed)
    else:
        samples = load_dataset(spec.data, spec.model.num_classes, spec.binarize)
    return split(samples, spec.val_fraction, spec.data_seed)


def evaluate(model: SegmentationNet, samples) -> MetricsReport:
    preds = predict(model, samples, batch_size=4)
    return evaluate_masks(preds, [s.mask for s in samples], model.config.num_classes)


@dataclass
class RunOutcome:
    report: MetricsReport
    fit: FitResult
    model: SegmentationNet
    paths: dict[str, Path] = field(default_factory=dict)


def train_and_evaluate(spec: ExperimentSpec) -> RunOutcome:
    train_set, val_set = load_samples(spec)
    model = SegmentationNet(spec.model, seed=spec.train.seed)
    logger.info("model %s: %d parameters", spec.model.mode, model.num_parameters())
    result = fit(model, train_set, spec.train, val_set, evaluate)
    report = evaluate(model, val_set or train_set)
    return RunOutcome(report, result, model)


def run_single(spec: ExperimentSpec) -> RunOutcome:
    """Train, evaluate on the held-out split and write metrics, curve and checkpoint."""
    out = Path(spec.output_dir)
    outcome = train_and_evaluate(spec)
    h = spec.spec_hash()
    outcome.paths["metrics"] = write_csv(out / "metrics.csv", ["class", "dice", "iou", "hd", "samples"],
                                         outcome.report.rows(), h)
    outcome.paths["loss"] = write_csv(
        out / "loss.csv", CURVE_HEADER,
        [(i, f"{t:.8f}", f"{c:.8f}", f"{d:.8f}") for i, t, c, d in outcome.fit.curve], h,
    )
    if outcome.fit.validation:
        outcome.paths["validation"] = write_csv(
            out / "validation.csv", ["iteration", "dice", "iou", "hd"],
            [(it, _fmt(r.mean_dice), _fmt(r.mean_iou), _fmt(r.mean_hausdorff))
             for it, r in outcome.fit.validation], h,
        )
    ckpt = out / "model.ckpt"
    save_checkpoint(outcome.model.state_dict(), ckpt, spec.model)
    outcome.paths["checkpoint"] = ckpt
    (out / "spec.txt").write_text(spec.canonical() + "\n")
    return outcome


def _ablation_row(args: tuple[str, ExperimentSpec]) -> list:
    label, spec = args
    outcome = train_and_evaluate(spec)
    r = outcome.report
    return [label, _fmt(r.mean_dice), _fmt(r.mean_iou), _fmt(r.mean_hausdorff),
            spec.train.max_iterations, spec.train.seed]


def _run_table(jobs: list[tuple[str, ExperimentSpec]], workers: int) -> list[list]:
    if workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            return list(pool.map(_ablation_row, jobs))
    rows = []
    for job in jobs:
        logger.info("ablation config %s", job[0])
        rows.append(_ablation_row(job))
    return rows


def skip_ablation_jobs(spec: ExperimentSpec) -> list[tuple[str, ExperimentSpec]]:
    return [(label, spec.replace(skip_modes=modes)) for label, modes in SKIP_ABLATION.items()]


def qk_ablation_jobs(spec: ExperimentSpec) -> list[tuple[str, ExperimentSpec]]:
    base = spec.replace(skip_modes="ctrans", use_cct=True)
    jobs = []
    for q in spec.query_sweep:
        levels = parse_levels(q)
        jobs.append(("Q" + "".join(map(str, levels)), base.replace(query_levels=levels, key_levels=(1, 2, 3, 4))))
    for k in spec.key_sweep:
        levels = parse_levels(k)
        jobs.append(("K" + "".join(map(str, levels)), base.replace(query_levels=(1, 2, 3, 4), key_levels=levels)))
    return jobs


def run_skip_ablation(spec: ExperimentSpec) -> tuple[list[list], Path]:
    """Train the ten copy/none wirings and tabulate held-out metrics."""
    rows = _run_table(skip_ablation_jobs(spec), spec.workers)
    path = write_csv(Path(spec.output_dir) / "skip_ablation.csv", ABLATION_HEADER, rows, spec.spec_hash())
    return rows, path


def run_qk_ablation(spec: ExperimentSpec) -> tuple[list[list], Path]:
    """Sweep query-level subsets (keys fixed) and key-level subsets (queries fixed)."""
    rows = _run_table(qk_ablation_jobs(spec), spec.workers)
    path = write_csv(Path(spec.output_dir) / "qk_ablation.csv", ABLATION_HEADER, rows, spec.spec_hash())
    return rows, path


# ----------------------------------------------------------------- inspection


def model_from_checkpoint(spec: ExperimentSpec, checkpoint) -> SegmentationNet:
    saved = load_checkpoint_config(checkpoint)
    config = ModelConfig(**saved) if saved else spec.model
    model = SegmentationNet(config, seed=spec.train.seed)
    tensors = load_checkpoint(checkpoint)
    params = dict(model.named_parameters())
    if set(tensors) != set(params):
        missing = sorted(set(params) - set(tensors))[:3]
        extra = sorted(set(tensors) - set(params))[:3]
        raise ConfigError(f"checkpoint does not fit the model (missing {missing}, unexpected {extra})")
    for name, p in params.items():
        if tensors[name].shape != p.shape:
            raise ConfigError(f"checkpoint tensor {name} has shape {tensors[name].shape}, model expects {p.shape}")
        p.data[...] = tensors[name]
    return model


def run_eval(spec: ExperimentSpec, checkpoint, subset: str = "val") -> tuple[MetricsReport, Path]:
    model = model_from_checkpoint(spec, checkpoint)
    train_set, val_set = load_samples(spec)
    samples = {"val": val_set or train_set, "train": train_set, "all": train_set + val_set}[subset]
    report = evaluate(model, samples)
    path = write_csv(Path(spec.output_dir) / f"eval_{subset}.csv", ["class", "dice", "iou", "hd", "samples"],
                     report.rows(), spec.spec_hash())
    return report, path


@dataclass
class AttentionSummary:
    levels: list[int]
    key_levels: list[int]
    key_channels: list[int]
    matrices: dict[int, np.ndarray]  # level -> C_i × C_Σ mean |M|
    summary: np.ndarray  # len(levels) × len(key_levels) block means
    per_layer: dict[tuple[int, int], np.ndarray] = field(default_factory=dict)  # (layer, level) -> mean |M|
    raw: list = field(default_factory=list)  # (layer, level, head, N×C_i×C_Σ)


def attention_summary(model: SegmentationNet, samples) -> AttentionSummary:
    """Average |similarity| over heads, layers and samples for each query level."""
    cct = model.cct
    if cct is None:
        raise ConfigError("model has no CCT module; similarity maps need a ctrans configuration")
    cfg = model.config
    chans = cfg.channels
    key_channels = [chans[k - 1] for k in cct.key_levels]
    sums: dict[int, np.ndarray] = {}
    counts: dict[int, int] = {}
    layer_sums: dict[tuple[int, int], np.ndarray] = {}
    layer_counts: dict[tuple[int, int], int] = {}
    raw = []
    cct.record = True
    try:
        for start in range(0, len(samples), 4):
            predict(model, samples[start:start + 4], batch_size=4)
            for layer, level, head, m in cct.recorded:
                raw.append((layer, level, head, m))
                total = np.abs(m).sum(axis=0)
                sums[level] = sums.get(level, 0) + total
                counts[level] = counts.get(level, 0) + m.shape[0]
                layer_sums[layer, level] = layer_sums.get((layer, level), 0) + total
                layer_counts[layer, level] = layer_counts.get((layer, level), 0) + m.shape[0]
    finally:
        cct.record = False
    matrices = {lv: sums[lv] / counts[lv] for lv in sorted(sums)}
    offsets = np.concatenate([[0], np.cumsum(key_channels)])
    levels = sorted(matrices)
    summary = np.array([
        [matrices[q][:, offsets[j]:offsets[j + 1]].mean() for j in range(len(key_channels))]
        for q in levels
    ])
    per_layer = {key: layer_sums[key] / layer_counts[key] for key in sorted(layer_sums)}
    return AttentionSummary(levels, list(cct.key_levels), key_channels, matrices, summary, per_layer, raw)


def export_attention(spec: ExperimentSpec, checkpoint) -> tuple[AttentionSummary, list[Path]]:
    model = model_from_checkpoint(spec, checkpoint)
    train_set, val_set = load_samples(spec)
    samples = val_set or train_set
    summ = attention_summary(model, samples)
    out = Path(spec.output_dir)
    h = spec.spec_hash()
    header_cols = [f"K{lv}_{c}" for lv, n in zip(summ.key_levels, summ.key_channels) for c in range(n)]
    paths = []
    def matrix_rows(lv, mat):
        return [[f"Q{lv}_{r}"] + [f"{v:.8f}" for v in row] for r, row in enumerate(mat)]

    for lv, mat in summ.matrices.items():
        paths.append(write_csv(out / f"similarity_level{lv}.csv", ["query"] + header_cols, matrix_rows(lv, mat), h))
    for (layer, lv), mat in summ.per_layer.items():
        paths.append(write_csv(out / f"similarity_level{lv}_layer{layer + 1}.csv", ["query"] + header_cols,
                               matrix_rows(lv, mat), h))
    rows = [[f"Q{q}"] + [f"{v:.8f}" for v in row] for q, row in zip(summ.levels, summ.summary)]
    paths.append(write_csv(out / "similarity_summary.csv", ["query"] + [f"K{k}" for k in summ.key_levels], rows, h))
    if model.cca is not None:
        model.cca.record = True
        predict(model, samples[:4], batch_size=4)
        model.cca.record = False
        mask_rows = [
            [lv, c, f"{v:.8f}"]
            for lv, m in sorted(model.cca.masks.items())
            for c, v in enumerate(m.mean(axis=0))
        ]
        paths.append(write_csv(out / "cca_masks.csv", ["level", "channel", "mean_mask"], mask_rows, h))
    return summ, paths
