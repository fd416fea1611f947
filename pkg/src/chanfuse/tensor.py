"""Dense tensors with reverse-mode differentiation.

Every primitive returns a new :class:`Tensor` that remembers its parents and a
closure mapping the output adjoint to the parent adjoints. Gradients are
accumulated by :class:`ComputeGraph`, which replays the recorded nodes in the
reverse of a fixed topological order so repeated passes are bitwise stable.
"""

from __future__ import annotations

import contextlib
import zlib
from typing import Callable, Iterator, Optional, Sequence, Union

import numpy as np
from scipy.special import erf

ArrayLike = Union["Tensor", np.ndarray, float, int, Sequence]

_default_dtype = np.dtype(np.float32)
_check_finite = True
_corrupted: dict[str, float] = {}
_branch_log: Optional[list] = None

NORM_EPS = 1e-5


class ShapeError(ValueError):
    """Operand shapes are incompatible with the requested operation."""


class NonFiniteError(FloatingPointError):
    """A primitive produced NaN or Inf from its inputs."""


def set_default_dtype(dtype) -> None:
    global _default_dtype
    dtype = np.dtype(dtype)
    if dtype not in (np.float32, np.float64):
        raise ValueError(f"unsupported dtype {dtype}; use float32 or float64")
    _default_dtype = dtype


def get_default_dtype() -> np.dtype:
    return _default_dtype


@contextlib.contextmanager
def default_dtype(dtype) -> Iterator[None]:
    previous = _default_dtype
    set_default_dtype(dtype)
    try:
        yield
    finally:
        set_default_dtype(previous)


@contextlib.contextmanager
def finite_checks(enabled: bool) -> Iterator[None]:
    global _check_finite
    previous = _check_finite
    _check_finite = enabled
    try:
        yield
    finally:
        _check_finite = previous


@contextlib.contextmanager
def corrupt_adjoint(op: str, factor: float = 1.01) -> Iterator[None]:
    """Scale every adjoint emitted by ``op`` (fault-injection hook for gradcheck)."""
    _corrupted[op] = factor
    try:
        yield
    finally:
        _corrupted.pop(op, None)


@contextlib.contextmanager
def branch_trace() -> Iterator[list]:
    """Collect a fingerprint of every piecewise branch taken (ReLU masks, max-pool
    winners) while active; equal traces mean the same smooth piece was evaluated."""
    global _branch_log
    previous = _branch_log
    _branch_log = []
    try:
        yield _branch_log
    finally:
        _branch_log = previous


def _log_branch(op: str, decision: np.ndarray) -> None:
    if _branch_log is not None:
        _branch_log.append((op, zlib.crc32(np.ascontiguousarray(decision).tobytes())))


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "op")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        if isinstance(data, Tensor):
            data = data.data
        arr = np.asarray(data)
        if dtype is not None:
            arr = arr.astype(dtype, copy=False)
        elif not np.issubdtype(arr.dtype, np.floating):
            arr = arr.astype(_default_dtype)
        self.data: np.ndarray = arr
        self.grad: Optional[np.ndarray] = None
        self.requires_grad = requires_grad
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Optional[Callable] = None
        self.op = "leaf"

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def dtype(self) -> np.dtype:
        return self.data.dtype

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def is_leaf(self) -> bool:
        return self._backward is None

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float(self.data)

    def detach(self) -> Tensor:
        return Tensor(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def backward(self) -> ComputeGraph:
        graph = ComputeGraph(self)
        graph.backward()
        return graph

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}, op={self.op}{flag})"

    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return neg(self)

    def __pow__(self, exponent: float):
        return power(self, exponent)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, index):
        return getitem(self, index)

    def reshape(self, *shape) -> Tensor:
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes) -> Tensor:
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes or None)

    @property
    def T(self) -> Tensor:
        return transpose(self, None)

    def sum(self, axis=None, keepdims: bool = False) -> Tensor:
        return tsum(self, axis, keepdims)

    def mean(self, axis=None, keepdims: bool = False) -> Tensor:
        return mean(self, axis, keepdims)


class ComputeGraph:
    """Nodes reachable from ``root`` in a fixed topological order."""

    def __init__(self, root: Tensor):
        self.root = root
        self.nodes = _toposort(root)

    def __len__(self) -> int:
        return len(self.nodes)

    def backward(self, seed: Optional[np.ndarray] = None) -> None:
        root = self.root
        if seed is None:
            if root.data.size != 1:
                raise ValueError(
                    f"backward needs a scalar seed; got output of shape {root.shape}"
                )
            seed = np.ones_like(root.data)
        adjoints: dict[int, np.ndarray] = {id(root): np.asarray(seed, dtype=root.dtype)}
        for node in reversed(self.nodes):
            g = adjoints.pop(id(node), None)
            if g is None:
                continue
            if node._backward is None:
                if node.requires_grad:
                    node.grad = g.copy() if node.grad is None else node.grad + g
                continue
            parent_grads = node._backward(g)
            factor = _corrupted.get(node.op)
            for parent, pg in zip(node._parents, parent_grads):
                if pg is None or not parent.requires_grad:
                    continue
                if factor is not None:
                    pg = pg * factor
                key = id(parent)
                if key in adjoints:
                    adjoints[key] = adjoints[key] + pg
                else:
                    adjoints[key] = pg


def _toposort(root: Tensor) -> list[Tensor]:
    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for parent in reversed(node._parents):
            if parent.requires_grad and id(parent) not in seen:
                stack.append((parent, False))
    return order


def as_tensor(x: ArrayLike, like: Optional[Tensor] = None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    dtype = like.dtype if like is not None else None
    return Tensor(np.asarray(x, dtype=dtype) if dtype is not None else x)


def _result(data: np.ndarray, parents: tuple[Tensor, ...], backward: Callable, op: str) -> Tensor:
    if _check_finite and not np.all(np.isfinite(data)):
        raise NonFiniteError(f"{op} produced non-finite values")
    out = Tensor(data)
    if any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = parents
        out._backward = backward
    out.op = op
    return out


def unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum ``grad`` down to ``shape``, undoing numpy broadcasting."""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad


# ---------------------------------------------------------------- elementwise


def add(a: ArrayLike, b: ArrayLike) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return _result(
        a.data + b.data,
        (a, b),
        lambda g: (unbroadcast(g, a.shape), unbroadcast(g, b.shape)),
        "add",
    )


def sub(a: ArrayLike, b: ArrayLike) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return _result(
        a.data - b.data,
        (a, b),
        lambda g: (unbroadcast(g, a.shape), unbroadcast(-g, b.shape)),
        "sub",
    )


def mul(a: ArrayLike, b: ArrayLike) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return _result(
        a.data * b.data,
        (a, b),
        lambda g: (unbroadcast(g * b.data, a.shape), unbroadcast(g * a.data, b.shape)),
        "mul",
    )


def div(a: ArrayLike, b: ArrayLike) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out = a.data / b.data
    return _result(
        out,
        (a, b),
        lambda g: (unbroadcast(g / b.data, a.shape), unbroadcast(-g * out / b.data, b.shape)),
        "div",
    )


def neg(a: Tensor) -> Tensor:
    return _result(-a.data, (a,), lambda g: (-g,), "neg")


def power(a: Tensor, exponent: float) -> Tensor:
    return _result(
        a.data**exponent,
        (a,),
        lambda g: (g * exponent * a.data ** (exponent - 1),),
        "power",
    )


def exp(a: Tensor) -> Tensor:
    out = np.exp(a.data)
    return _result(out, (a,), lambda g: (g * out,), "exp")


def log(a: Tensor) -> Tensor:
    with np.errstate(divide="ignore", invalid="ignore"):
        out = np.log(a.data)
    return _result(out, (a,), lambda g: (g / a.data,), "log")


def relu(a: Tensor) -> Tensor:
    mask = a.data > 0
    _log_branch("relu", mask)
    return _result(a.data * mask, (a,), lambda g: (g * mask,), "relu")


def sigmoid(a: Tensor) -> Tensor:
    x = a.data
    # split by sign so neither branch overflows
    e = np.exp(-np.abs(x))
    out = np.where(x >= 0, 1.0 / (1.0 + e), e / (1.0 + e)).astype(x.dtype, copy=False)
    return _result(out, (a,), lambda g: (g * out * (1.0 - out),), "sigmoid")


def gelu(a: Tensor) -> Tensor:
    x = a.data
    cdf = 0.5 * (1.0 + erf(x / np.sqrt(2.0)))
    pdf = np.exp(-0.5 * x * x) / np.sqrt(2.0 * np.pi)
    return _result((x * cdf).astype(x.dtype, copy=False), (a,), lambda g: (g * (cdf + x * pdf),), "gelu")


def activation(x: Tensor, kind: str) -> Tensor:
    if kind == "relu":
        return relu(x)
    if kind == "sigmoid":
        return sigmoid(x)
    if kind == "gelu":
        return gelu(x)
    raise ValueError(f"unknown activation {kind!r}")


# ------------------------------------------------------------ shape plumbing


def reshape(a: Tensor, shape: Sequence[int]) -> Tensor:
    if int(np.prod(shape)) != a.size and -1 not in shape:
        raise ShapeError(f"cannot reshape {a.shape} into {tuple(shape)}")
    src = a.shape
    return _result(a.data.reshape(shape), (a,), lambda g: (g.reshape(src),), "reshape")


def transpose(a: Tensor, axes: Optional[Sequence[int]] = None) -> Tensor:
    if axes is None:
        axes = tuple(reversed(range(a.ndim)))
    inverse = tuple(np.argsort(axes))
    return _result(
        np.transpose(a.data, axes), (a,), lambda g: (np.transpose(g, inverse),), "transpose"
    )


def swap_last(a: Tensor) -> Tensor:
    axes = list(range(a.ndim))
    axes[-1], axes[-2] = axes[-2], axes[-1]
    return transpose(a, axes)


def getitem(a: Tensor, index) -> Tensor:
    def backward(g):
        full = np.zeros_like(a.data)
        np.add.at(full, index, g)
        return (full,)

    return _result(a.data[index], (a,), backward, "getitem")


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = tuple(tensors)
    ref = tensors[0].shape
    ax = axis % len(ref)
    for t in tensors[1:]:
        if t.ndim != len(ref) or any(
            t.shape[i] != ref[i] for i in range(len(ref)) if i != ax
        ):
            raise ShapeError(
                f"concat along axis {axis}: shapes {[x.shape for x in tensors]} disagree"
            )
    splits = np.cumsum([t.shape[ax] for t in tensors])[:-1]

    def backward(g):
        return tuple(np.split(g, splits, axis=ax))

    return _result(np.concatenate([t.data for t in tensors], axis=ax), tensors, backward, "concat")


def tsum(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    out = a.data.sum(axis=axis, keepdims=keepdims)

    def backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, a.shape).copy(),)

    return _result(np.asarray(out), (a,), backward, "sum")


def mean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    out = a.data.mean(axis=axis, keepdims=keepdims)
    if axis is None:
        count = a.size
    else:
        axes = (axis,) if isinstance(axis, int) else tuple(axis)
        count = int(np.prod([a.shape[i] for i in axes]))

    def backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g / count, a.shape).copy(),)

    return _result(np.asarray(out), (a,), backward, "mean")


# -------------------------------------------------------------- linear algebra


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product over the last two axes, broadcasting leading axes."""
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul dimension mismatch: {a.shape} @ {b.shape}")

    def backward(g):
        ga = unbroadcast(g @ np.swapaxes(b.data, -1, -2), a.shape)
        gb = unbroadcast(np.swapaxes(a.data, -1, -2) @ g, b.shape)
        return ga, gb

    return _result(a.data @ b.data, (a, b), backward, "matmul")


# ------------------------------------------------------------ normalization


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    shifted = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    out = e / e.sum(axis=axis, keepdims=True)

    def backward(g):
        return (out * (g - (g * out).sum(axis=axis, keepdims=True)),)

    return _result(out, (x,), backward, "softmax")


def log_softmax(x: Tensor, axis: int = -1) -> Tensor:
    shifted = x.data - x.data.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=axis, keepdims=True))
    out = shifted - lse
    probs = np.exp(out)

    def backward(g):
        return (g - probs * g.sum(axis=axis, keepdims=True),)

    return _result(out, (x,), backward, "log_softmax")


def standardize(x: Tensor, axes: Sequence[int], eps: float = NORM_EPS, op: str = "standardize") -> Tensor:
    """Zero-mean, unit-variance over ``axes`` (biased variance)."""
    axes = tuple(a % x.ndim for a in axes)
    mu = x.data.mean(axis=axes, keepdims=True)
    centered = x.data - mu
    var = (centered * centered).mean(axis=axes, keepdims=True)
    inv_std = 1.0 / np.sqrt(var + eps)
    out = centered * inv_std

    def backward(g):
        gm = g.mean(axis=axes, keepdims=True)
        gy = (g * out).mean(axis=axes, keepdims=True)
        return (inv_std * (g - gm - out * gy),)

    return _result(out, (x,), backward, op)


def instance_norm(s: Tensor, eps: float = NORM_EPS) -> Tensor:
    """Normalize each trailing 2-D map (one per instance) to mean 0, variance 1."""
    if s.ndim < 2 or s.shape[-1] * s.shape[-2] < 2:
        raise ShapeError(f"instance_norm needs a map with at least 2 entries, got {s.shape}")
    return standardize(s, (-2, -1), eps, op="instance_norm")


def layer_norm(x: Tensor, axis: int = -1, gain: Optional[ArrayLike] = None,
               offset: Optional[ArrayLike] = None, eps: float = NORM_EPS) -> Tensor:
    y = standardize(x, (axis,), eps, op="layer_norm")
    if gain is not None:
        y = mul(y, gain)
    if offset is not None:
        y = add(y, offset)
    return y


# ------------------------------------------------------------------ spatial


def _as_batched(x: Tensor) -> tuple[Tensor, bool]:
    if x.ndim == 3:
        return reshape(x, (1,) + x.shape), True
    if x.ndim != 4:
        raise ShapeError(f"expected C×H×W or N×C×H×W input, got {x.shape}")
    return x, False


def conv2d(x: Tensor, w: Tensor, bias: Optional[Tensor] = None, pad: int = 0, stride: int = 1) -> Tensor:
    """2-D cross-correlation of ``x`` (N×C×H×W or C×H×W) with ``w`` (O×C×k×k)."""
    x, squeeze = _as_batched(x)
    n, c, h, wd = x.shape
    o, ci, kh, kw = w.shape
    if ci != c:
        raise ShapeError(f"conv2d channel mismatch: input {x.shape}, kernel {w.shape}")
    hp, wp = h + 2 * pad, wd + 2 * pad
    if kh > hp or kw > wp:
        raise ShapeError(f"kernel {kh}×{kw} does not fit padded input {hp}×{wp}")
    if (hp - kh) % stride or (wp - kw) % stride:
        raise ShapeError(
            f"conv2d output extent is not integral: ({hp}-{kh})/{stride}+1, ({wp}-{kw})/{stride}+1"
        )
    ho, wo = (hp - kh) // stride + 1, (wp - kw) // stride + 1
    xp = np.pad(x.data, ((0, 0), (0, 0), (pad, pad), (pad, pad))) if pad else x.data
    cols = np.lib.stride_tricks.sliding_window_view(xp, (kh, kw), axis=(2, 3))
    cols = cols[:, :, ::stride, ::stride]  # N,C,Ho,Wo,kh,kw
    out = np.tensordot(cols, w.data, axes=([1, 4, 5], [1, 2, 3]))  # N,Ho,Wo,O
    out = np.ascontiguousarray(out.transpose(0, 3, 1, 2))
    if bias is not None:
        out += bias.data.reshape(1, o, 1, 1)

    def backward(g):
        gw = np.tensordot(g, cols, axes=([0, 2, 3], [0, 2, 3]))
        gxp = np.zeros_like(xp)
        for i in range(kh):
            for j in range(kw):
                contrib = np.tensordot(w.data[:, :, i, j], g, axes=([0], [1]))  # C,N,Ho,Wo
                gxp[:, :, i:i + stride * ho:stride, j:j + stride * wo:stride] += contrib.transpose(1, 0, 2, 3)
        gx = gxp[:, :, pad:pad + h, pad:pad + wd] if pad else gxp
        grads = [gx, gw]
        if bias is not None:
            grads.append(g.sum(axis=(0, 2, 3)))
        return tuple(grads)

    parents = (x, w) if bias is None else (x, w, bias)
    y = _result(out, parents, backward, "conv2d")
    return reshape(y, y.shape[1:]) if squeeze else y


def _pool_view(x: Tensor, k: int, name: str) -> tuple[int, ...]:
    *lead, h, w = x.shape
    if h % k or w % k:
        raise ShapeError(f"{name}: spatial extent {h}×{w} not divisible by {k}")
    return (*lead, h // k, k, w // k, k)


def max_pool2d(x: Tensor, k: int = 2) -> Tensor:
    view = _pool_view(x, k, "max_pool2d")
    blocks = x.data.reshape(view)
    nd = blocks.ndim
    moved = np.moveaxis(blocks, nd - 3, nd - 2).reshape(*view[:-4], view[-4], view[-2], k * k)
    idx = moved.argmax(axis=-1)
    _log_branch("max_pool2d", idx)
    out = np.take_along_axis(moved, idx[..., None], axis=-1)[..., 0]

    def backward(g):
        gm = np.zeros_like(moved)
        np.put_along_axis(gm, idx[..., None], g[..., None], axis=-1)
        gm = gm.reshape(*view[:-4], view[-4], view[-2], k, k)
        gm = np.moveaxis(gm, nd - 2, nd - 3)
        return (gm.reshape(x.shape),)

    return _result(out, (x,), backward, "max_pool2d")


def avg_pool2d(x: Tensor, k: int) -> Tensor:
    """Non-overlapping k×k patch means."""
    view = _pool_view(x, k, "avg_pool2d")
    out = x.data.reshape(view).mean(axis=(-3, -1))

    def backward(g):
        g = np.repeat(np.repeat(g, k, axis=-2), k, axis=-1)
        return (g / (k * k),)

    return _result(out, (x,), backward, "avg_pool2d")


def upsample_nearest(x: Tensor, factor: int) -> Tensor:
    if factor < 1:
        raise ValueError(f"upsample factor must be positive, got {factor}")
    if factor == 1:
        return x
    out = np.repeat(np.repeat(x.data, factor, axis=-2), factor, axis=-1)
    view = _pool_view(Tensor(out), factor, "upsample_nearest")

    def backward(g):
        return (g.reshape(view).sum(axis=(-3, -1)),)

    return _result(out, (x,), backward, "upsample_nearest")


def global_avg_pool(x: Tensor) -> Tensor:
    """Per-channel spatial mean; C×H×W -> C×1×1 (leading axes preserved)."""
    return mean(x, axis=(-2, -1), keepdims=True)
