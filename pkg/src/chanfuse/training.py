"""Loss, optimizer, augmentation and the training loop."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping, Optional, Sequence

import numpy as np

from . import tensor as T
from .data import DataError, SegmentationSample, load_checkpoint, stack_batch
from .nn import Module
from .tensor import NonFiniteError, Tensor
from .unet import UNET_NAMESPACE

logger = logging.getLogger(__name__)


class TrainingDivergedError(FloatingPointError):
    def __init__(self, iteration: int, term: str, detail: str = ""):
        self.iteration = iteration
        self.term = term
        super().__init__(f"non-finite {term} at iteration {iteration}" + (f": {detail}" if detail else ""))


class PretrainedLoadError(ValueError):
    pass


@dataclass
class TrainConfig:
    learning_rate: float = 0.001
    batch_size: int = 4
    max_iterations: int = 500
    seed: int = 0
    w_ce: float = 0.5
    w_dice: float = 0.5
    dice_smooth: float = 1e-5
    dice_classes: str = "foreground"  # or "all"
    augment: bool = True
    hflip: bool = True
    vflip: bool = True
    rotate: bool = True
    strategy: str = "joint"  # or "pretrained"
    pretrain_checkpoint: Optional[str] = None
    val_every: int = 0

    def __post_init__(self):
        if abs(self.w_ce + self.w_dice - 1.0) > 1e-9:
            raise ValueError(f"loss weights must sum to 1, got {self.w_ce} + {self.w_dice}")
        if self.strategy not in ("joint", "pretrained"):
            raise ValueError(f"strategy must be 'joint' or 'pretrained', got {self.strategy!r}")
        if self.dice_classes not in ("foreground", "all"):
            raise ValueError(f"dice_classes must be 'foreground' or 'all', got {self.dice_classes!r}")
        if self.batch_size < 1 or self.max_iterations < 0:
            raise ValueError("batch_size must be positive and max_iterations non-negative")


# ---------------------------------------------------------------------- loss


def one_hot(mask: np.ndarray, num_classes: int, dtype) -> np.ndarray:
    """``N×H×W`` labels -> ``N×K×H×W`` indicator array."""
    mask = np.asarray(mask)
    if mask.min() < 0 or mask.max() >= num_classes:
        raise DataError(f"mask labels span [{mask.min()}, {mask.max()}], outside 0..{num_classes - 1}")
    return np.moveaxis(np.eye(num_classes, dtype=dtype)[mask], -1, 1)


@dataclass
class LossTerms:
    total: Tensor
    ce: Tensor
    dice: Tensor


def combined_loss(logits: Tensor, mask: np.ndarray, w_ce: float = 0.5, w_dice: float = 0.5,
                  smooth: float = 1e-5, dice_classes: str = "foreground") -> LossTerms:
    """``w_ce * CE + w_dice * (1 - soft Dice)`` over an ``N×K×H×W`` batch.

    Soft Dice is accumulated over the whole batch per class, then averaged over
    the foreground classes (or every class with ``dice_classes="all"``).
    """
    k = logits.shape[1]
    target = one_hot(mask, k, logits.dtype)
    pixels = target.size // k
    ce = -(T.log_softmax(logits, axis=1) * target).sum() * (1.0 / pixels)
    probs = T.softmax(logits, axis=1)
    inter = (probs * target).sum(axis=(0, 2, 3))
    denom = probs.sum(axis=(0, 2, 3)) + target.sum(axis=(0, 2, 3))
    per_class = (inter * 2.0 + smooth) / (denom + smooth)
    if dice_classes == "foreground" and k > 1:
        per_class = per_class[1:]
    dice_loss = 1.0 - per_class.mean()
    return LossTerms(ce * w_ce + dice_loss * w_dice, ce, dice_loss)


# ----------------------------------------------------------------- optimizer


@dataclass
class AdamState:
    step: int = 0
    m: list = field(default_factory=list)
    v: list = field(default_factory=list)


def adam_step(params: Sequence[np.ndarray], grads: Sequence[Optional[np.ndarray]], state: AdamState,
              lr: float = 0.001, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8) -> AdamState:
    """In-place bias-corrected Adam update of ``params``."""
    if not state.m:
        state.m = [np.zeros_like(p) for p in params]
        state.v = [np.zeros_like(p) for p in params]
    state.step += 1
    c1 = 1.0 - beta1**state.step
    c2 = 1.0 - beta2**state.step
    for p, g, m, v in zip(params, grads, state.m, state.v):
        if g is None:
            g = np.zeros_like(p)
        m *= beta1
        m += (1.0 - beta1) * g
        v *= beta2
        v += (1.0 - beta2) * g * g
        p -= (lr * (m / c1) / (np.sqrt(v / c2) + eps)).astype(p.dtype, copy=False)
    return state


class Adam:
    def __init__(self, params: Sequence[Tensor], lr: float = 0.001, betas=(0.9, 0.999), eps: float = 1e-8):
        self.params = list(params)
        self.lr = lr
        self.betas = betas
        self.eps = eps
        self.state = AdamState()

    def step(self) -> None:
        adam_step([p.data for p in self.params], [p.grad for p in self.params], self.state,
                  self.lr, self.betas[0], self.betas[1], self.eps)

    def zero_grad(self) -> None:
        for p in self.params:
            p.grad = None


# -------------------------------------------------------------- augmentation


def augment(sample: SegmentationSample, rng: np.random.Generator, hflip: bool = True,
            vflip: bool = True, rotate: bool = True) -> SegmentationSample:
    """Apply one random flip/rot90 combination identically to image and mask."""
    image, mask = sample.image, sample.mask
    # draw all three decisions every time so the stream does not depend on flags
    do_h, do_v, quarter = rng.random() < 0.5, rng.random() < 0.5, int(rng.integers(0, 4))
    if hflip and do_h:
        image, mask = image[:, ::-1], mask[:, ::-1]
    if vflip and do_v:
        image, mask = image[::-1], mask[::-1]
    if rotate and quarter:
        image, mask = np.rot90(image, quarter, axes=(0, 1)), np.rot90(mask, quarter, axes=(0, 1))
    return SegmentationSample(np.ascontiguousarray(image), np.ascontiguousarray(mask), sample.identifier)


# ------------------------------------------------------------ pretraining


@dataclass
class LoadReport:
    matched: list[str]
    unmatched: list[str]

    def __str__(self) -> str:
        return f"{len(self.matched)} tensors loaded, {len(self.unmatched)} left at initialization"


def load_pretrained_unet(model: Module, checkpoint) -> LoadReport:
    """Copy every U-Net tensor of ``checkpoint`` into ``model`` by canonical name.

    CCT/CCA tensors are never touched. A shape disagreement or a U-Net tensor
    the checkpoint lacks raises :class:`PretrainedLoadError`.
    """
    if isinstance(checkpoint, (str, Path)):
        checkpoint = load_checkpoint(checkpoint)
    params = dict(model.named_parameters())
    unet_names = [n for n in params if n.startswith(UNET_NAMESPACE)]
    for name in unet_names:
        if name not in checkpoint:
            raise PretrainedLoadError(f"checkpoint has no tensor {name!r}")
        if checkpoint[name].shape != params[name].shape:
            raise PretrainedLoadError(
                f"shape mismatch at {name!r}: checkpoint {checkpoint[name].shape} vs model {params[name].shape}"
            )
    for name in unet_names:
        params[name].data[...] = checkpoint[name]
    unmatched = [n for n in params if n not in unet_names]
    report = LoadReport(unet_names, unmatched)
    logger.info("pretrained U-Net: %s", report)
    return report


# ----------------------------------------------------------------- training


@dataclass
class FitResult:
    curve: list[tuple[int, float, float, float]]  # iteration, total, ce, dice
    validation: list[tuple[int, dict]] = field(default_factory=list)
    load_report: Optional[LoadReport] = None


def _batches(n: int, batch_size: int, rng: np.random.Generator):
    while True:
        order = rng.permutation(n)
        for start in range(0, n, batch_size):
            chunk = order[start:start + batch_size]
            if len(chunk) < batch_size and n >= batch_size:
                chunk = np.concatenate([chunk, order[: batch_size - len(chunk)]])
            yield chunk


def fit(model: Module, samples: Sequence[SegmentationSample], config: TrainConfig,
        val_samples: Sequence[SegmentationSample] = (), evaluate=None) -> FitResult:
    """Train ``model`` in place; deterministic for a fixed ``config.seed``."""
    report = None
    if config.strategy == "pretrained":
        if not config.pretrain_checkpoint or not Path(config.pretrain_checkpoint).exists():
            raise PretrainedLoadError("strategy 'pretrained' needs an existing pretrain_checkpoint")
        report = load_pretrained_unet(model, config.pretrain_checkpoint)
    if not samples:
        raise DataError("no training samples")
    dtype = model.config.dtype
    rng = np.random.default_rng(config.seed)
    aug_rng = np.random.default_rng([config.seed, 1])
    order = _batches(len(samples), config.batch_size, rng)
    opt = Adam(model.parameters(), lr=config.learning_rate)
    result = FitResult(curve=[], load_report=report)
    for it in range(1, config.max_iterations + 1):
        batch = [samples[i] for i in next(order)]
        if config.augment:
            batch = [augment(s, aug_rng, config.hflip, config.vflip, config.rotate) for s in batch]
        images, masks = stack_batch(batch, dtype)
        try:
            logits = model(Tensor(images))
            terms = combined_loss(logits, masks, config.w_ce, config.w_dice,
                                  config.dice_smooth, config.dice_classes)
        except NonFiniteError as exc:
            raise TrainingDivergedError(it, "forward", str(exc)) from exc
        for name, term in (("ce", terms.ce), ("dice", terms.dice)):
            if not np.isfinite(term.item()):
                raise TrainingDivergedError(it, name)
        opt.zero_grad()
        try:
            terms.total.backward()
        except NonFiniteError as exc:
            raise TrainingDivergedError(it, "backward", str(exc)) from exc
        opt.step()
        result.curve.append((it, terms.total.item(), terms.ce.item(), terms.dice.item()))
        if config.val_every and val_samples and evaluate is not None and it % config.val_every == 0:
            result.validation.append((it, evaluate(model, val_samples)))
        if it % 50 == 0:
            logger.info("iter %d loss %.4f", it, terms.total.item())
    return result


def predict(model: Module, samples: Sequence[SegmentationSample], batch_size: int = 4) -> list[np.ndarray]:
    """Arg-max label maps for ``samples``."""
    out = []
    for start in range(0, len(samples), batch_size):
        images, _ = stack_batch(samples[start:start + batch_size], model.config.dtype)
        logits = model(Tensor(images)).data
        out.extend(logits.argmax(axis=1))
    return out
