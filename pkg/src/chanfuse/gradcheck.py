"""Central-difference verification of every primitive and of a full model loss."""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np

from . import tensor as T
from .config import ModelConfig
from .tensor import Tensor

STEP = 1e-5
TOLERANCE = 1e-4
# denominator floor: below this, gradients are compared in absolute terms
SCALE_FLOOR = 1e-6
# step sizes tried in turn when a perturbation crosses a ReLU/max-pool switch
KINK_STEPS = (STEP, 1e-6, 1e-7)


def relative_error(analytic: float, numeric: float, floor: float = SCALE_FLOOR) -> float:
    return abs(analytic - numeric) / max(abs(analytic), abs(numeric), floor)


@dataclass
class CheckResult:
    name: str
    max_rel_error: float
    worst: str = ""

    def passed(self, tol: float = TOLERANCE) -> bool:
        return self.max_rel_error < tol


@dataclass
class GradcheckReport:
    primitives: list[CheckResult] = field(default_factory=list)
    samples: list[tuple[str, tuple, float, float, float]] = field(default_factory=list)
    tolerance: float = TOLERANCE

    @property
    def max_rel_error(self) -> float:
        return max((s[4] for s in self.samples), default=0.0)

    @property
    def worst_parameter(self) -> str:
        if not self.samples:
            return ""
        name, index, *_ = max(self.samples, key=lambda s: s[4])
        return f"{name}[{','.join(map(str, index))}]"

    @property
    def failed_ops(self) -> list[str]:
        return [r.name for r in self.primitives if not r.passed(self.tolerance)]

    @property
    def passed(self) -> bool:
        return not self.failed_ops and self.max_rel_error < self.tolerance

    def summary(self) -> str:
        lines = [f"{'op':<18} {'max rel err':>12}  status"]
        for r in self.primitives:
            lines.append(f"{r.name:<18} {r.max_rel_error:>12.3e}  {'ok' if r.passed(self.tolerance) else 'FAIL'}")
        lines.append(
            f"model: {len(self.samples)} sampled parameters, max rel err {self.max_rel_error:.3e} "
            f"at {self.worst_parameter}"
        )
        if self.failed_ops:
            lines.append("failing ops: " + ", ".join(self.failed_ops))
        lines.append("PASS" if self.passed else "FAIL")
        return "\n".join(lines)

    def rows(self) -> list[list[str]]:
        rows = [["op", r.name, "", "", f"{r.max_rel_error:.6e}"] for r in self.primitives]
        for name, index, a, n, e in self.samples:
            rows.append(["param", f"{name}[{','.join(map(str, index))}]", f"{a:.12e}", f"{n:.12e}", f"{e:.6e}"])
        return rows

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["kind", "name", "analytic", "numeric", "rel_error"])
        w.writerows(self.rows())
        return buf.getvalue()


def check_function(name: str, fn: Callable[..., Tensor], inputs: list[np.ndarray],
                   rng: np.random.Generator, h: float = STEP) -> CheckResult:
    """Compare adjoints of ``sum(fn(*inputs) * w)`` with central differences, all entries."""
    with T.default_dtype(np.float64):
        leaves = [Tensor(x.astype(np.float64), requires_grad=True) for x in inputs]
        out = fn(*leaves)
        weights = rng.standard_normal(out.shape)
        T.ComputeGraph(out).backward(seed=weights)
        worst, where = 0.0, ""
        for k, leaf in enumerate(leaves):
            analytic = leaf.grad if leaf.grad is not None else np.zeros_like(leaf.data)
            for idx in np.ndindex(leaf.shape):
                orig = leaf.data[idx]
                leaf.data[idx] = orig + h
                plus = float((fn(*leaves).data * weights).sum())
                leaf.data[idx] = orig - h
                minus = float((fn(*leaves).data * weights).sum())
                leaf.data[idx] = orig
                err = relative_error(float(analytic[idx]), (plus - minus) / (2 * h))
                if err > worst:
                    worst, where = err, f"input{k}{list(idx)}"
    return CheckResult(name, worst, where)


def _primitive_cases(rng: np.random.Generator) -> list[tuple[str, Callable, list[np.ndarray]]]:
    r = rng.standard_normal
    away_from_zero = np.sign(r((3, 4))) * rng.uniform(0.2, 1.5, (3, 4))
    distinct = rng.permutation(32).reshape(1, 2, 4, 4) + rng.uniform(0, 0.5, (1, 2, 4, 4))
    return [
        ("add", lambda a, b: T.add(a, b), [r((3, 4)), r((1, 4))]),
        ("sub", lambda a, b: T.sub(a, b), [r((3, 4)), r((3, 1))]),
        ("mul", lambda a, b: T.mul(a, b), [r((3, 4)), r((4,))]),
        ("div", lambda a, b: T.div(a, b), [r((3, 4)), away_from_zero]),
        ("neg", T.neg, [r((3, 4))]),
        ("power", lambda a: T.power(a, 3.0), [r((3, 4))]),
        ("exp", T.exp, [r((3, 4))]),
        ("log", T.log, [np.abs(away_from_zero)]),
        ("relu", T.relu, [away_from_zero]),
        ("sigmoid", T.sigmoid, [r((3, 4))]),
        ("gelu", T.gelu, [r((3, 4))]),
        ("reshape", lambda a: T.reshape(a, (4, 3)), [r((3, 4))]),
        ("transpose", lambda a: T.transpose(a, (2, 0, 1)), [r((2, 3, 4))]),
        ("getitem", lambda a: T.getitem(a, (slice(1, 3), [0, 2, 2])), [r((3, 4))]),
        ("concat", lambda a, b: T.concat([a, b], axis=1), [r((2, 3)), r((2, 2))]),
        ("sum", lambda a: T.tsum(a, axis=1), [r((3, 4))]),
        ("mean", lambda a: T.mean(a, axis=(0, 2), keepdims=True), [r((2, 3, 4))]),
        ("matmul", T.matmul, [r((2, 3, 4)), r((4, 5))]),
        ("softmax", lambda a: T.softmax(a, axis=-1), [r((3, 5))]),
        ("log_softmax", lambda a: T.log_softmax(a, axis=1), [r((2, 3, 4))]),
        ("instance_norm", T.instance_norm, [r((2, 3, 4))]),
        ("layer_norm", lambda a: T.layer_norm(a, -1), [r((3, 5))]),
        ("conv2d", lambda x, w, b: T.conv2d(x, w, b, pad=1), [r((2, 2, 5, 5)), r((3, 2, 3, 3)), r((3,))]),
        ("conv2d_strided", lambda x, w: T.conv2d(x, w, pad=1, stride=2), [r((1, 2, 5, 5)), r((2, 2, 3, 3))]),
        ("max_pool2d", lambda a: T.max_pool2d(a, 2), [distinct]),
        ("avg_pool2d", lambda a: T.avg_pool2d(a, 2), [r((1, 2, 4, 4))]),
        ("upsample_nearest", lambda a: T.upsample_nearest(a, 2), [r((2, 2, 3))]),
        ("global_avg_pool", T.global_avg_pool, [r((2, 3, 3))]),
    ]


def check_primitives(seed: int = 0, h: float = STEP) -> list[CheckResult]:
    rng = np.random.default_rng(seed)
    cases = _primitive_cases(rng)
    # strided conv reports under the op name it exercises
    return [
        check_function(name.replace("_strided", ""), fn, inputs, rng, h)
        for name, fn, inputs in cases
    ]


def miniature_config(base: Optional[ModelConfig] = None) -> ModelConfig:
    base = base or ModelConfig.ctrans()
    return base.with_(image_size=16, base_channels=4, heads=2, cct_layers=2, patch_size=8,
                      in_channels=base.in_channels, dtype="float64")


def jitter_constants(model, rng: np.random.Generator, scale: float = 0.1) -> None:
    """Move constant-initialized tensors (norm gains/offsets, biases, positional
    embeddings) to generic values so no ReLU input sits exactly on its kink."""
    for name, p in model.named_parameters():
        leaf = name.rsplit(".", 1)[-1]
        if leaf in ("gain", "offset", "bias") or name.startswith("cct.pos."):
            p.data += scale * rng.standard_normal(p.shape)


def _smooth_difference(loss: Callable[[], Tensor], data: np.ndarray, idx: tuple,
                       base_trace: list, steps: Sequence[float]) -> float:
    """Central difference using the largest step whose ±h evaluations take the
    same ReLU/max-pool branches as the unperturbed point."""
    orig = data[idx]
    numeric = 0.0
    for h in steps:
        data[idx] = orig + h
        with T.branch_trace() as plus_trace:
            plus = loss().item()
        data[idx] = orig - h
        with T.branch_trace() as minus_trace:
            minus = loss().item()
        data[idx] = orig
        numeric = (plus - minus) / (2 * h)
        if plus_trace == base_trace and minus_trace == base_trace:
            break
    return numeric


def check_model(config: ModelConfig, seed: int = 0, n_samples: int = 256, batch: int = 2,
                steps: Sequence[float] = KINK_STEPS, model=None) -> list[tuple[str, tuple, float, float, float]]:
    """Sample parameter entries of the model loss and compare with central differences.

    Every parameter tensor is sampled at least once when ``n_samples`` allows;
    the remainder is drawn uniformly over all entries.
    """
    from .training import combined_loss
    from .unet import SegmentationNet

    if config.dtype != "float64":
        raise ValueError("gradient checks need a float64 model")
    rng = np.random.default_rng(seed)
    if model is None:
        model = SegmentationNet(config, seed)
        jitter_constants(model, rng)
    size = config.image_size
    image = rng.uniform(0, 1, (batch, config.in_channels, size, size))
    mask = rng.integers(0, config.num_classes, (batch, size, size))
    with T.default_dtype(np.float64):
        x = Tensor(image)

        def loss() -> Tensor:
            return combined_loss(model(x), mask).total

        model.zero_grad()
        loss().backward()
        named = list(model.named_parameters())
        picks: list[tuple[int, tuple]] = []
        for k, (_, p) in enumerate(named[: min(len(named), n_samples)]):
            picks.append((k, tuple(int(i) for i in np.unravel_index(rng.integers(p.size), p.shape))))
        sizes = np.array([p.size for _, p in named], dtype=np.float64)
        while len(picks) < n_samples:
            k = int(rng.choice(len(named), p=sizes / sizes.sum()))
            p = named[k][1]
            picks.append((k, tuple(int(i) for i in np.unravel_index(rng.integers(p.size), p.shape))))
        with T.branch_trace() as trace:
            loss()
        base = list(trace)
        results = []
        for k, idx in picks:
            name, p = named[k]
            analytic = float(p.grad[idx]) if p.grad is not None else 0.0
            numeric = _smooth_difference(loss, p.data, idx, base, steps)
            results.append((name, idx, analytic, numeric, relative_error(analytic, numeric)))
    return results


def gradcheck(config: Optional[ModelConfig] = None, seed: int = 0, n_samples: int = 256,
              tolerance: float = TOLERANCE) -> GradcheckReport:
    cfg = config if config is not None and config.dtype == "float64" else miniature_config(config)
    report = GradcheckReport(tolerance=tolerance)
    report.primitives = check_primitives(seed)
    report.samples = check_model(cfg, seed, n_samples)
    return report
