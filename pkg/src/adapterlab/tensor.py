"""Minimal deterministic reverse-mode autodiff over dense float64 arrays.

Ops record onto an ambient tape in execution order, so the reversed tape is
already a topological order and backward visits each node exactly once.
Training code resets the tape every step; sampling and metrics run under
``no_grad()`` so nothing is recorded.

Supported broadcasting is deliberately narrow: scalar operands, a (d,) bias
against (n, d) rows, and a (C,) bias against (C, H, W) channels. Everything
else must match shapes exactly.
"""

from __future__ import annotations

import struct
from typing import Callable, Iterable

import numpy as np

from . import kernels
from .errors import ConfigurationError, ContractError, DimensionError, NonFiniteError

ACTIVATION_KINDS = ("relu", "sigmoid", "silu", "identity")

_tape: list[tuple["Tensor", Callable[[np.ndarray], None]]] = []
_grad_enabled = True


def _check_finite(data: np.ndarray, opname: str) -> None:
    # A non-finite element always poisons the sum, which is ~3x cheaper than
    # isfinite().all() on these small arrays.
    if not np.isfinite(np.sum(data)):
        raise NonFiniteError(f"{opname} produced non-finite values")


class Tensor:
    """Dense float64 array with an optional gradient buffer."""

    __slots__ = ("data", "requires_grad", "grad")

    def __init__(self, data, requires_grad: bool = False, _check: bool = True):
        # order="C" keeps 0-d arrays 0-d, unlike ascontiguousarray
        arr = np.asarray(data, dtype=np.float64, order="C")
        if not arr.flags.c_contiguous:
            arr = np.ascontiguousarray(arr)
        if _check:
            _check_finite(arr, "tensor construction")
        self.data = arr
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        return float(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data.copy(), requires_grad=False, _check=False)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    # Operator sugar; the named functions below do the work.
    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(self, other)

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)


class no_grad:
    """Context manager that disables tape recording."""

    def __enter__(self):
        global _grad_enabled
        self._prev = _grad_enabled
        _grad_enabled = False
        return self

    def __exit__(self, *exc):
        global _grad_enabled
        _grad_enabled = self._prev
        return False


def grad_enabled() -> bool:
    return _grad_enabled


def reset_tape() -> None:
    """Drop all recorded operations; call once per training step."""
    _tape.clear()


def tape_size() -> int:
    return len(_tape)


def _record(out: Tensor, backward_fn: Callable[[np.ndarray], None]) -> None:
    if _grad_enabled and out.requires_grad:
        _tape.append((out, backward_fn))


def _accum(t: Tensor, g: np.ndarray) -> None:
    if t.requires_grad:
        if t.grad is None:
            t.grad = np.zeros_like(t.data)
        t.grad += g


def _result(data: np.ndarray, parents: Iterable[Tensor], opname: str) -> Tensor:
    requires = _grad_enabled and any(p.requires_grad for p in parents)
    _check_finite(data, opname)
    arr = np.asarray(data, dtype=np.float64, order="C")
    if not arr.flags.c_contiguous:
        arr = np.ascontiguousarray(arr)
    out = Tensor.__new__(Tensor)
    out.data = arr
    out.requires_grad = requires
    out.grad = None
    return out


def backward(loss: Tensor) -> None:
    """Populate .grad on every requires_grad tensor reachable from loss."""
    if loss.data.ndim != 0:
        raise ContractError(f"backward expects a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        raise ContractError("loss was not produced under an active tape with trainable inputs")
    loss.grad = np.ones_like(loss.data)
    for out, fn in reversed(_tape):
        if out.grad is not None:
            fn(out.grad)


# --- elementwise and broadcast arithmetic -----------------------------------


def add(a: Tensor, b) -> Tensor:
    if not isinstance(b, Tensor):
        out = _result(a.data + float(b), (a,), "add")
        _record(out, lambda g, a=a: _accum(a, g))
        return out
    if a.shape == b.shape:
        out = _result(a.data + b.data, (a, b), "add")

        def bw(g, a=a, b=b):
            _accum(a, g)
            _accum(b, g)

    elif a.data.ndim == 2 and b.shape == (a.shape[1],):
        # row bias: (n, d) + (d,)
        out = _result(a.data + b.data[None, :], (a, b), "add")

        def bw(g, a=a, b=b):
            _accum(a, g)
            _accum(b, g.sum(axis=0))

    elif a.data.ndim == 3 and b.shape == (a.shape[0],):
        # channel bias: (C, H, W) + (C,)
        out = _result(a.data + b.data[:, None, None], (a, b), "add")

        def bw(g, a=a, b=b):
            _accum(a, g)
            _accum(b, g.sum(axis=(1, 2)))

    else:
        raise DimensionError(f"cannot add shapes {a.shape} and {b.shape}")
    _record(out, bw)
    return out


def sub(a: Tensor, b) -> Tensor:
    if isinstance(b, Tensor):
        return add(a, mul(b, -1.0))
    return add(a, -float(b))


def mul(a: Tensor, b) -> Tensor:
    if not isinstance(b, Tensor):
        s = float(b)
        out = _result(a.data * s, (a,), "mul")
        _record(out, lambda g, a=a, s=s: _accum(a, g * s))
        return out
    if a.shape != b.shape:
        raise DimensionError(f"cannot multiply shapes {a.shape} and {b.shape}")
    out = _result(a.data * b.data, (a, b), "mul")

    def bw(g, a=a, b=b):
        _accum(a, g * b.data)
        _accum(b, g * a.data)

    _record(out, bw)
    return out


def square(a: Tensor) -> Tensor:
    out = _result(a.data * a.data, (a,), "square")
    _record(out, lambda g, a=a: _accum(a, 2.0 * a.data * g))
    return out


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.data.ndim != 2 or b.data.ndim != 2 or a.shape[1] != b.shape[0]:
        raise DimensionError(f"matmul shapes {a.shape} x {b.shape} are incompatible")
    out = _result(a.data @ b.data, (a, b), "matmul")

    def bw(g, a=a, b=b):
        _accum(a, g @ b.data.T)
        _accum(b, a.data.T @ g)

    _record(out, bw)
    return out


def transpose(a: Tensor) -> Tensor:
    if a.data.ndim != 2:
        raise DimensionError(f"transpose expects a matrix, got shape {a.shape}")
    out = _result(a.data.T, (a,), "transpose")
    _record(out, lambda g, a=a: _accum(a, np.ascontiguousarray(g.T)))
    return out


def reshape(a: Tensor, shape: tuple[int, ...]) -> Tensor:
    out = _result(a.data.reshape(shape), (a,), "reshape")
    _record(out, lambda g, a=a: _accum(a, g.reshape(a.shape)))
    return out


def concat(a: Tensor, b: Tensor, axis: int = 0) -> Tensor:
    out = _result(np.concatenate([a.data, b.data], axis=axis), (a, b), "concat")
    split = a.shape[axis]

    def bw(g, a=a, b=b, split=split, axis=axis):
        idx = [slice(None)] * g.ndim
        idx[axis] = slice(0, split)
        _accum(a, np.ascontiguousarray(g[tuple(idx)]))
        idx[axis] = slice(split, None)
        _accum(b, np.ascontiguousarray(g[tuple(idx)]))

    _record(out, bw)
    return out


def tsum(a: Tensor) -> Tensor:
    out = _result(np.asarray(a.data.sum()), (a,), "sum")
    _record(out, lambda g, a=a: _accum(a, np.broadcast_to(g, a.shape).copy()))
    return out


def tmean(a: Tensor) -> Tensor:
    n = a.size
    out = _result(np.asarray(a.data.mean()), (a,), "mean")
    _record(out, lambda g, a=a, n=n: _accum(a, np.broadcast_to(g / n, a.shape).copy()))
    return out


def mean_rows(a: Tensor) -> Tensor:
    """(n, d) -> (1, d) row average."""
    if a.data.ndim != 2:
        raise DimensionError(f"mean_rows expects a matrix, got shape {a.shape}")
    n = a.shape[0]
    out = _result(a.data.mean(axis=0, keepdims=True), (a,), "mean_rows")
    _record(out, lambda g, a=a, n=n: _accum(a, np.broadcast_to(g / n, a.shape).copy()))
    return out


def broadcast_rows(a: Tensor, n: int) -> Tensor:
    """(1, d) -> (n, d) row replication."""
    if a.data.ndim != 2 or a.shape[0] != 1:
        raise DimensionError(f"broadcast_rows expects shape (1, d), got {a.shape}")
    out = _result(np.broadcast_to(a.data, (n, a.shape[1])).copy(), (a,), "broadcast_rows")
    _record(out, lambda g, a=a: _accum(a, g.sum(axis=0, keepdims=True)))
    return out


# --- activations -------------------------------------------------------------


def _sigmoid(x: np.ndarray) -> np.ndarray:
    # Split by sign to avoid exp overflow warnings.
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def relu(a: Tensor) -> Tensor:
    out = _result(np.maximum(a.data, 0.0), (a,), "relu")
    _record(out, lambda g, a=a: _accum(a, g * (a.data > 0.0)))
    return out


def sigmoid(a: Tensor) -> Tensor:
    s = _sigmoid(a.data)
    out = _result(s, (a,), "sigmoid")
    _record(out, lambda g, a=a, s=s: _accum(a, g * s * (1.0 - s)))
    return out


def silu(a: Tensor) -> Tensor:
    s = _sigmoid(a.data)
    out = _result(a.data * s, (a,), "silu")
    _record(out, lambda g, a=a, s=s: _accum(a, g * s * (1.0 + a.data * (1.0 - s))))
    return out


def activation(a: Tensor, kind: str) -> Tensor:
    """Elementwise activation: one of relu, sigmoid, silu, identity."""
    if kind == "relu":
        return relu(a)
    if kind == "sigmoid":
        return sigmoid(a)
    if kind == "silu":
        return silu(a)
    if kind == "identity":
        return a
    raise ValueError(f"unknown activation kind {kind!r}; expected one of {ACTIVATION_KINDS}")


# --- normalization and attention primitives ----------------------------------


def softmax_rows(a: Tensor) -> Tensor:
    """Row-wise softmax of a matrix, computed with per-row max subtraction."""
    if a.data.ndim != 2:
        raise DimensionError(f"softmax_rows expects a matrix, got shape {a.shape}")
    shifted = a.data - a.data.max(axis=1, keepdims=True)
    e = np.exp(shifted)
    y = e / e.sum(axis=1, keepdims=True)
    out = _result(y, (a,), "softmax_rows")

    def bw(g, a=a, y=y):
        _accum(a, y * (g - (g * y).sum(axis=1, keepdims=True)))

    _record(out, bw)
    return out


def layer_norm(a: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-5) -> Tensor:
    """Per-row normalization of (n, d) with affine (d,) parameters."""
    if a.data.ndim != 2 or gamma.shape != (a.shape[1],) or beta.shape != (a.shape[1],):
        raise DimensionError(
            f"layer_norm shapes x={a.shape} gamma={gamma.shape} beta={beta.shape} are inconsistent"
        )
    mu = a.data.mean(axis=1, keepdims=True)
    var = a.data.var(axis=1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = (a.data - mu) * inv
    out = _result(xhat * gamma.data[None, :] + beta.data[None, :], (a, gamma, beta), "layer_norm")

    def bw(g, a=a, gamma=gamma, beta=beta, xhat=xhat, inv=inv):
        _accum(gamma, (g * xhat).sum(axis=0))
        _accum(beta, g.sum(axis=0))
        gx = g * gamma.data[None, :]
        m1 = gx.mean(axis=1, keepdims=True)
        m2 = (gx * xhat).mean(axis=1, keepdims=True)
        _accum(a, (gx - m1 - xhat * m2) * inv)

    _record(out, bw)
    return out


def group_norm(a: Tensor, groups: int, gamma: Tensor, beta: Tensor, eps: float = 1e-5) -> Tensor:
    """Group normalization of (C, H, W) with per-channel affine parameters."""
    if a.data.ndim != 3:
        raise DimensionError(f"group_norm expects (C, H, W), got shape {a.shape}")
    c, h, w = a.shape
    if c % groups != 0:
        raise ConfigurationError(f"channel count {c} not divisible by {groups} groups")
    if gamma.shape != (c,) or beta.shape != (c,):
        raise DimensionError(f"group_norm affine shapes {gamma.shape}/{beta.shape} != ({c},)")
    grouped = a.data.reshape(groups, -1)
    mu = grouped.mean(axis=1, keepdims=True)
    var = grouped.var(axis=1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = ((grouped - mu) * inv).reshape(c, h, w)
    out = _result(
        xhat * gamma.data[:, None, None] + beta.data[:, None, None], (a, gamma, beta), "group_norm"
    )

    def bw(g, a=a, gamma=gamma, beta=beta, xhat=xhat, inv=inv, groups=groups):
        _accum(gamma, (g * xhat).sum(axis=(1, 2)))
        _accum(beta, g.sum(axis=(1, 2)))
        gx = (g * gamma.data[:, None, None]).reshape(groups, -1)
        xh = xhat.reshape(groups, -1)
        m1 = gx.mean(axis=1, keepdims=True)
        m2 = (gx * xh).mean(axis=1, keepdims=True)
        _accum(a, ((gx - m1 - xh * m2) * inv).reshape(a.shape))

    _record(out, bw)
    return out


# --- spatial ops --------------------------------------------------------------


def conv2d(x: Tensor, w: Tensor, b: Tensor) -> Tensor:
    """3x3 convolution with padding 1 and stride 1; spatial size is preserved."""
    if x.data.ndim != 3:
        raise DimensionError(f"conv2d expects input (C, H, W), got shape {x.shape}")
    if w.data.ndim != 4 or w.shape[2:] != (3, 3):
        raise DimensionError(f"conv2d expects a (C_out, C_in, 3, 3) kernel, got {w.shape}")
    if w.shape[1] != x.shape[0]:
        raise DimensionError(f"conv2d channel mismatch: input {x.shape} vs kernel {w.shape}")
    if b.shape != (w.shape[0],):
        raise DimensionError(f"conv2d bias shape {b.shape} != ({w.shape[0]},)")
    out = _result(kernels.conv3x3_forward(x.data, w.data, b.data), (x, w, b), "conv2d")

    def bw(g, x=x, w=w, b=b):
        gx, gw, gb = kernels.conv3x3_backward(x.data, w.data, np.ascontiguousarray(g))
        _accum(x, gx)
        _accum(w, gw)
        _accum(b, gb)

    _record(out, bw)
    return out


def avg_pool2(a: Tensor) -> Tensor:
    """2x2 average pooling of (C, H, W); H and W must be even."""
    c, h, w = a.shape
    if h % 2 or w % 2:
        raise DimensionError(f"avg_pool2 needs even spatial dims, got {a.shape}")
    pooled = a.data.reshape(c, h // 2, 2, w // 2, 2).mean(axis=(2, 4))
    out = _result(pooled, (a,), "avg_pool2")

    def bw(g, a=a):
        _accum(a, np.repeat(np.repeat(g, 2, axis=1), 2, axis=2) * 0.25)

    _record(out, bw)
    return out


def upsample2(a: Tensor) -> Tensor:
    """Nearest-neighbor 2x upsampling of (C, H, W)."""
    up = np.repeat(np.repeat(a.data, 2, axis=1), 2, axis=2)
    out = _result(up, (a,), "upsample2")

    def bw(g, a=a):
        c, h, w = a.shape
        _accum(a, g.reshape(c, h, 2, w, 2).sum(axis=(2, 4)))

    _record(out, bw)
    return out


def chw_to_tokens(a: Tensor) -> Tensor:
    """(C, H, W) -> (H*W, C): one token per spatial position."""
    c, h, w = a.shape
    out = _result(a.data.reshape(c, h * w).T, (a,), "chw_to_tokens")
    _record(out, lambda g, a=a: _accum(a, np.ascontiguousarray(g.T).reshape(a.shape)))
    return out


def tokens_to_chw(a: Tensor, h: int, w: int) -> Tensor:
    """(H*W, C) -> (C, H, W); inverse of chw_to_tokens."""
    n, c = a.shape
    if n != h * w:
        raise DimensionError(f"token count {n} != {h}x{w}")
    out = _result(np.ascontiguousarray(a.data.T).reshape(c, h, w), (a,), "tokens_to_chw")
    _record(out, lambda g, a=a: _accum(a, g.reshape(a.shape[1], -1).T))
    return out


# --- persistence ---------------------------------------------------------------

# Flat binary layout: little-endian u32 rank, u32 extents, f64 row-major payload.


def write_tensor(fh, arr: np.ndarray) -> None:
    arr = np.asarray(arr, dtype=np.float64, order="C")
    fh.write(struct.pack("<I", arr.ndim))
    fh.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
    fh.write(arr.astype("<f8").tobytes())


def read_tensor(fh) -> np.ndarray:
    rank = struct.unpack("<I", fh.read(4))[0]
    shape = struct.unpack(f"<{rank}I", fh.read(4 * rank)) if rank else ()
    count = int(np.prod(shape)) if shape else 1
    data = np.frombuffer(fh.read(8 * count), dtype="<f8", count=count)
    return data.reshape(shape).astype(np.float64)


def save_tensor(path, arr: np.ndarray) -> None:
    with open(path, "wb") as fh:
        write_tensor(fh, arr)


def load_tensor(path) -> np.ndarray:
    with open(path, "rb") as fh:
        return read_tensor(fh)


def finite_diff(f: Callable[[], Tensor], param: Tensor, coords, step: float = 1e-5):
    """Central finite differences of scalar f w.r.t. param at the given flat coords."""
    grads = []
    flat = param.data.reshape(-1)
    for idx in coords:
        orig = flat[idx]
        flat[idx] = orig + step
        with no_grad():
            hi = f().item()
        flat[idx] = orig - step
        with no_grad():
            lo = f().item()
        flat[idx] = orig
        grads.append((hi - lo) / (2.0 * step))
    return np.array(grads)
