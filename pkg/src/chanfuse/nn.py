"""Parameter containers and the small set of layers the networks are built from."""

from __future__ import annotations

from typing import Iterator, Optional

import numpy as np

from . import tensor as T
from .tensor import Tensor


def parameter(data: np.ndarray) -> Tensor:
    return Tensor(np.asarray(data, dtype=T.get_default_dtype()), requires_grad=True)


def kaiming_uniform(rng: np.random.Generator, shape: tuple[int, ...], fan_in: int) -> Tensor:
    bound = np.sqrt(6.0 / fan_in)
    return parameter(rng.uniform(-bound, bound, size=shape))


def xavier_uniform(rng: np.random.Generator, shape: tuple[int, ...], fan_in: int, fan_out: int) -> Tensor:
    bound = np.sqrt(6.0 / (fan_in + fan_out))
    return parameter(rng.uniform(-bound, bound, size=shape))


class Module:
    """Attribute-based parameter tree with dotted canonical names.

    Parameters are the ``requires_grad`` tensors stored as attributes, or inside
    lists of modules/tensors. Traversal follows attribute insertion order, so
    names and ordering are a pure function of construction.
    """

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Tensor]]:
        for name, value in vars(self).items():
            yield from _walk(value, prefix + name)

    def parameters(self) -> list[Tensor]:
        return [p for _, p in self.named_parameters()]

    def state_dict(self) -> dict[str, np.ndarray]:
        return {name: p.data for name, p in self.named_parameters()}

    def num_parameters(self) -> int:
        return sum(p.size for p in self.parameters())

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.grad = None

    def __call__(self, *args, **kwargs):
        return self.forward(*args, **kwargs)


def _walk(value, name: str) -> Iterator[tuple[str, Tensor]]:
    if isinstance(value, Tensor):
        if value.requires_grad:
            yield name, value
    elif isinstance(value, Module):
        yield from value.named_parameters(name + ".")
    elif isinstance(value, (list, tuple)):
        for i, item in enumerate(value):
            yield from _walk(item, f"{name}.{i}")
    elif isinstance(value, dict):
        for key, item in value.items():
            yield from _walk(item, f"{name}.{key}")


class Linear(Module):
    """Acts on the last axis: ``y = x @ weight + bias`` with weight ``in×out``."""

    def __init__(self, rng: np.random.Generator, d_in: int, d_out: int, bias: bool = True):
        self.weight = xavier_uniform(rng, (d_in, d_out), d_in, d_out)
        self.bias = parameter(np.zeros(d_out)) if bias else None

    def forward(self, x: Tensor) -> Tensor:
        y = T.matmul(x, self.weight)
        return y + self.bias if self.bias is not None else y


class Conv2d(Module):
    def __init__(self, rng: np.random.Generator, c_in: int, c_out: int, k: int = 3, bias: bool = True):
        self.weight = kaiming_uniform(rng, (c_out, c_in, k, k), c_in * k * k)
        self.bias = parameter(np.zeros(c_out)) if bias else None
        self.pad = k // 2

    def forward(self, x: Tensor) -> Tensor:
        return T.conv2d(x, self.weight, self.bias, pad=self.pad)


class InstanceNorm2d(Module):
    """Per-sample, per-channel spatial normalization with a learned affine."""

    def __init__(self, channels: int):
        self.gain = parameter(np.ones((channels, 1, 1)))
        self.offset = parameter(np.zeros((channels, 1, 1)))

    def forward(self, x: Tensor) -> Tensor:
        return T.standardize(x, (-2, -1), op="instance_norm") * self.gain + self.offset


class LayerNorm(Module):
    def __init__(self, features: int):
        self.gain = parameter(np.ones(features))
        self.offset = parameter(np.zeros(features))

    def forward(self, x: Tensor) -> Tensor:
        return T.layer_norm(x, -1, self.gain, self.offset)


class ConvNormAct(Module):
    def __init__(self, rng: np.random.Generator, c_in: int, c_out: int):
        self.conv = Conv2d(rng, c_in, c_out, 3)
        self.norm = InstanceNorm2d(c_out)

    def forward(self, x: Tensor) -> Tensor:
        return T.relu(self.norm(self.conv(x)))


class DoubleConv(Module):
    """Two (conv3×3 -> instance norm -> ReLU) stages."""

    def __init__(self, rng: np.random.Generator, c_in: int, c_out: int, c_mid: Optional[int] = None):
        c_mid = c_mid or c_out
        self.stages = [ConvNormAct(rng, c_in, c_mid), ConvNormAct(rng, c_mid, c_out)]

    def forward(self, x: Tensor) -> Tensor:
        for stage in self.stages:
            x = stage(x)
        return x
