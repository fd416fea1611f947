"""Channel-wise cross attention gate between transformer skips and the decoder."""

from __future__ import annotations

import numpy as np

from . import tensor as T
from .nn import Linear, Module
from .tensor import Tensor


class FusionError(T.ShapeError):
    """A skip feature and the decoder feature it meets have incompatible shapes."""


def cca_gate(o: Tensor, d: Tensor, l1: Linear, l2: Linear, relu: bool = False) -> tuple[Tensor, Tensor]:
    """Recalibrate ``o`` channel-wise from pooled ``o`` and ``d`` statistics.

    The mask is ``sigmoid(L1 g(o) + L2 g(d))`` with ``g`` the global average
    pool. ``Linear`` stores weights input-major, so ``weight`` here is the
    transpose of the matrix that left-multiplies the pooled column vector.
    Returns the gated map and the ``[N×]C×1×1`` mask.
    """
    if o.shape != d.shape:
        raise FusionError(f"CCA inputs disagree: skip {o.shape} vs decoder {d.shape}")
    *lead, c, _, _ = o.shape
    go = T.global_avg_pool(o).reshape(*lead, 1, c)
    gd = T.global_avg_pool(d).reshape(*lead, 1, c)
    m = l1(go) + l2(gd)
    if relu:
        m = T.relu(m)
    mask = T.sigmoid(m).reshape(*lead, c, 1, 1)
    return o * mask, mask


def fuse(gated: Tensor, decoder_up: Tensor) -> Tensor:
    """Channel concatenation ``[gated ; decoder_up]``."""
    if gated.shape[:-3] != decoder_up.shape[:-3] or gated.shape[-2:] != decoder_up.shape[-2:]:
        raise FusionError(f"cannot fuse {gated.shape} with {decoder_up.shape}")
    return T.concat([gated, decoder_up], axis=-3)


class CCALevel(Module):
    def __init__(self, rng: np.random.Generator, channels: int):
        self.l1 = Linear(rng, channels, channels)
        self.l2 = Linear(rng, channels, channels)


class CCA(Module):
    def __init__(self, rng: np.random.Generator, levels: dict[int, int], relu: bool = False):
        self.gates = {str(lv): CCALevel(rng, c) for lv, c in levels.items()}
        self.relu = relu
        self.record = False
        self.masks: dict[int, np.ndarray] = {}

    def __contains__(self, level: int) -> bool:
        return str(level) in self.gates

    def forward(self, level: int, o: Tensor, d: Tensor) -> Tensor:
        gate = self.gates[str(level)]
        out, mask = cca_gate(o, d, gate.l1, gate.l2, self.relu)
        if self.record:
            self.masks[level] = mask.data.reshape(mask.shape[:-2]).copy()
        return out
