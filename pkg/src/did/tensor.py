"""Dense tensors with tape-based reverse-mode automatic differentiation.

Values live in row-major numpy arrays (float64 by default so gradients can
be verified against central finite differences). Ops record onto the
innermost active :class:`GradTape`; with no active tape, forward passes run
without any bookkeeping, which is what inference uses.

Typical training step::

    with GradTape() as tape:
        loss = model_loss(...)
    backward(loss)
    # read .grad off the parameters, then discard the tape
"""

from __future__ import annotations

import struct
import threading
from typing import Callable, Sequence

import numpy as np

from .errors import ContractError, DimensionError, NumericError

DEFAULT_DTYPE = np.float64

_tape_stack = threading.local()


def _stack() -> list:
    if not hasattr(_tape_stack, "stack"):
        _tape_stack.stack = []
    return _tape_stack.stack


def _active_tape() -> "GradTape | None":
    stack = _stack()
    return stack[-1] if stack else None


class Tensor:
    """Dense n-dimensional array, optionally participating in autodiff.

    ``grad`` is lazily allocated by ``backward`` and shares the value's
    shape and dtype.
    """

    __slots__ = ("data", "requires_grad", "grad", "_tape")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        arr = np.asarray(data, dtype=dtype if dtype is not None else DEFAULT_DTYPE)
        self.data = np.ascontiguousarray(arr)
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self._tape: GradTape | None = None

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def dtype(self):
        return self.data.dtype

    def item(self) -> float:
        if self.data.size != 1:
            raise ContractError(f"item() on tensor of shape {self.shape}")
        return float(self.data.reshape(()))

    def numpy(self) -> np.ndarray:
        return self.data

    def zero_grad(self) -> None:
        self.grad = None

    def accumulate_grad(self, g: np.ndarray) -> None:
        if self.grad is None:
            self.grad = np.zeros_like(self.data)
        self.grad += g

    def backward(self) -> None:
        backward(self)

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    # Operator sugar over the free functions below.
    def __add__(self, other: "Tensor") -> "Tensor":
        return add(self, other)

    def __sub__(self, other: "Tensor") -> "Tensor":
        return add(self, scale(other, -1.0))

    def __neg__(self) -> "Tensor":
        return scale(self, -1.0)

    def __mul__(self, other):
        if isinstance(other, Tensor):
            return mul(self, other)
        return scale(self, float(other))

    def __rmul__(self, other):
        return scale(self, float(other))

    def __matmul__(self, other: "Tensor") -> "Tensor":
        return matmul(self, other)


class _Node:
    __slots__ = ("out", "backward_fn")

    def __init__(self, out: Tensor, backward_fn: Callable[[np.ndarray], None]):
        self.out = out
        self.backward_fn = backward_fn


class GradTape:
    """Ordered record of primitive ops, replayed in reverse by ``backward``.

    Confined to one thread. Enter it as a context manager to make it the
    active tape; ``reset()`` clears it for reuse between steps.
    """

    def __init__(self):
        self._nodes: list[_Node] = []
        self._consumed = False

    def __enter__(self) -> "GradTape":
        _stack().append(self)
        return self

    def __exit__(self, exc_type, exc, tb) -> None:
        popped = _stack().pop()
        assert popped is self, "GradTape contexts must nest"

    def __len__(self) -> int:
        return len(self._nodes)

    def reset(self) -> None:
        self._nodes.clear()
        self._consumed = False

    def _replay(self, loss: Tensor) -> None:
        if self._consumed:
            raise ContractError("backward() called twice on the same tape without reset()")
        if not self._nodes:
            raise ContractError("backward() on an empty tape")
        loss.grad = np.ones_like(loss.data)
        # Recording order is a topological order for define-by-run graphs,
        # so reversed replay visits each node after all its consumers.
        for node in reversed(self._nodes):
            g = node.out.grad
            if g is None:
                continue
            node.backward_fn(g)
        self._consumed = True


def backward(loss: Tensor) -> None:
    """Populate ``.grad`` on every requires_grad tensor reachable from ``loss``."""
    if loss.data.size != 1:
        raise ContractError(f"backward() needs a scalar loss, got shape {loss.shape}")
    if loss._tape is None:
        raise ContractError("loss was not recorded on a tape (no grad-requiring inputs "
                            "or no active GradTape during the forward pass)")
    loss._tape._replay(loss)


def zero_grads(params) -> None:
    """Clear gradients on an iterable (or dict) of tensors."""
    values = params.values() if isinstance(params, dict) else params
    for p in values:
        p.zero_grad()


def _record(out: Tensor, inputs: Sequence[Tensor],
            backward_fn: Callable[[np.ndarray], None]) -> Tensor:
    tape = _active_tape()
    if tape is not None and any(t.requires_grad for t in inputs):
        out.requires_grad = True
        out._tape = tape
        tape._nodes.append(_Node(out, backward_fn))
    return out


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    """Reduce a broadcast gradient back to ``shape``."""
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, extent in enumerate(shape):
        if extent == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g.reshape(shape)


# ---------------------------------------------------------------------------
# Primitive operations
# ---------------------------------------------------------------------------

def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise DimensionError(f"matmul shape mismatch: {a.shape} x {b.shape}")
    out = Tensor(a.data @ b.data)

    def bwd(g: np.ndarray) -> None:
        if a.requires_grad:
            a.accumulate_grad(g @ b.data.T)
        if b.requires_grad:
            b.accumulate_grad(a.data.T @ g)

    return _record(out, (a, b), bwd)


def transpose(x: Tensor) -> Tensor:
    if x.ndim != 2:
        raise DimensionError(f"transpose expects a matrix, got shape {x.shape}")
    out = Tensor(x.data.T.copy())

    def bwd(g: np.ndarray) -> None:
        if x.requires_grad:
            x.accumulate_grad(g.T)

    return _record(out, (x,), bwd)


def reshape(x: Tensor, shape) -> Tensor:
    shape = tuple(shape)
    if int(np.prod(shape, dtype=np.int64)) != x.size:
        raise DimensionError(f"cannot reshape {x.shape} to {shape}")
    out = Tensor(x.data.reshape(shape))

    def bwd(g: np.ndarray) -> None:
        if x.requires_grad:
            x.accumulate_grad(g.reshape(x.shape))

    return _record(out, (x,), bwd)


def add(a: Tensor, b: Tensor) -> Tensor:
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise DimensionError(f"add shape mismatch: {a.shape} vs {b.shape}") from None
    out = Tensor(a.data + b.data)

    def bwd(g: np.ndarray) -> None:
        if a.requires_grad:
            a.accumulate_grad(_unbroadcast(g, a.shape))
        if b.requires_grad:
            b.accumulate_grad(_unbroadcast(g, b.shape))

    return _record(out, (a, b), bwd)


def mul(a: Tensor, b: Tensor) -> Tensor:
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise DimensionError(f"mul shape mismatch: {a.shape} vs {b.shape}") from None
    out = Tensor(a.data * b.data)

    def bwd(g: np.ndarray) -> None:
        if a.requires_grad:
            a.accumulate_grad(_unbroadcast(g * b.data, a.shape))
        if b.requires_grad:
            b.accumulate_grad(_unbroadcast(g * a.data, b.shape))

    return _record(out, (a, b), bwd)


def scale(a: Tensor, c: float) -> Tensor:
    c = float(c)
    out = Tensor(a.data * c)

    def bwd(g: np.ndarray) -> None:
        if a.requires_grad:
            a.accumulate_grad(g * c)

    return _record(out, (a,), bwd)


def relu(x: Tensor) -> Tensor:
    out = Tensor(np.maximum(x.data, 0.0))

    def bwd(g: np.ndarray) -> None:
        if x.requires_grad:
            x.accumulate_grad(g * (x.data > 0.0))

    return _record(out, (x,), bwd)


def softmax(x: Tensor, axis: int) -> Tensor:
    if np.isnan(x.data).any():
        raise NumericError("softmax input contains NaN")
    shifted = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    s = e / e.sum(axis=axis, keepdims=True)
    out = Tensor(s)

    def bwd(g: np.ndarray) -> None:
        if x.requires_grad:
            inner = (g * s).sum(axis=axis, keepdims=True)
            x.accumulate_grad(s * (g - inner))

    return _record(out, (x,), bwd)


def log_softmax(x: Tensor, axis: int) -> Tensor:
    if np.isnan(x.data).any():
        raise NumericError("log_softmax input contains NaN")
    shifted = x.data - x.data.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=axis, keepdims=True))
    out_data = shifted - lse
    out = Tensor(out_data)
    sm = np.exp(out_data)

    def bwd(g: np.ndarray) -> None:
        if x.requires_grad:
            x.accumulate_grad(g - sm * g.sum(axis=axis, keepdims=True))

    return _record(out, (x,), bwd)


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-6) -> Tensor:
    """Normalize the last axis to zero mean / unit (population) variance,
    then apply the elementwise affine ``gain * xhat + bias``."""
    d = x.shape[-1]
    if gain.shape != (d,) or bias.shape != (d,):
        raise DimensionError(
            f"layer_norm affine shapes {gain.shape}/{bias.shape} do not match last axis {d}")
    m = x.data.mean(axis=-1, keepdims=True)
    centered = x.data - m
    var = (centered * centered).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = centered * inv
    out = Tensor(gain.data * xhat + bias.data)

    def bwd(g: np.ndarray) -> None:
        if gain.requires_grad:
            gain.accumulate_grad((g * xhat).reshape(-1, d).sum(axis=0))
        if bias.requires_grad:
            bias.accumulate_grad(g.reshape(-1, d).sum(axis=0))
        if x.requires_grad:
            dxhat = g * gain.data
            # Closed-form VJP of (x - mean) / sqrt(var + eps) over the last axis.
            term1 = dxhat.mean(axis=-1, keepdims=True)
            term2 = (dxhat * xhat).mean(axis=-1, keepdims=True)
            x.accumulate_grad(inv * (dxhat - term1 - xhat * term2))

    return _record(out, (x, gain, bias), bwd)


def mean(x: Tensor, axis: int) -> Tensor:
    n = x.shape[axis]
    out = Tensor(x.data.mean(axis=axis))

    def bwd(g: np.ndarray) -> None:
        if x.requires_grad:
            x.accumulate_grad(np.expand_dims(g, axis).repeat(n, axis=axis) / n)

    return _record(out, (x,), bwd)


def std(x: Tensor, axis: int, grad_floor: float = 1e-8) -> Tensor:
    """Population standard deviation along ``axis``.

    The forward value is exact (a constant slice yields exactly 0); the
    floor only guards the backward division so gradients stay finite.
    """
    n = x.shape[axis]
    m = x.data.mean(axis=axis, keepdims=True)
    centered = x.data - m
    var = (centered * centered).mean(axis=axis)
    s = np.sqrt(var)
    out = Tensor(s)

    def bwd(g: np.ndarray) -> None:
        if x.requires_grad:
            denom = np.maximum(s, grad_floor)
            gg = np.expand_dims(g / denom, axis)
            x.accumulate_grad(gg * centered / n)

    return _record(out, (x,), bwd)


def tsum(x: Tensor, axis: int | None = None) -> Tensor:
    out = Tensor(x.data.sum(axis=axis))

    def bwd(g: np.ndarray) -> None:
        if x.requires_grad:
            if axis is None:
                x.accumulate_grad(np.full_like(x.data, g.reshape(())[()]))
            else:
                x.accumulate_grad(np.expand_dims(g, axis).repeat(x.shape[axis], axis=axis))

    return _record(out, (x,), bwd)


def concat(tensors: Sequence[Tensor], axis: int) -> Tensor:
    if not tensors:
        raise DimensionError("concat of an empty list")
    ref = tensors[0].shape
    for t in tensors[1:]:
        if len(t.shape) != len(ref) or any(
                i != axis and t.shape[i] != ref[i] for i in range(len(ref))):
            raise DimensionError(
                f"concat shape mismatch along axis {axis}: "
                f"{[t.shape for t in tensors]}")
    out = Tensor(np.concatenate([t.data for t in tensors], axis=axis))
    sizes = [t.shape[axis] for t in tensors]
    offsets = np.cumsum([0] + sizes)

    def bwd(g: np.ndarray) -> None:
        for t, lo, hi in zip(tensors, offsets[:-1], offsets[1:]):
            if t.requires_grad:
                idx = [slice(None)] * g.ndim
                idx[axis] = slice(lo, hi)
                t.accumulate_grad(g[tuple(idx)])

    return _record(out, tuple(tensors), bwd)


def conv1d(x: Tensor, kernels: Tensor, stride: int = 1, padding: int = 0) -> Tensor:
    """1-D cross-correlation over the time axis.

    ``x`` is ``(T, C_in)`` (a bare ``(T,)`` signal is treated as one channel)
    and ``kernels`` is ``(k, C_in, C_out)`` (a bare ``(k,)`` kernel maps one
    channel to one). ``out[t, o] = sum_{j,c} x[t*stride + j - padding, c] *
    kernels[j, c, o]`` with zeros outside the signal.
    """
    squeeze = x.ndim == 1 and kernels.ndim == 1
    xd = x.data[:, None] if x.ndim == 1 else x.data
    kd = kernels.data[:, None, None] if kernels.ndim == 1 else kernels.data
    if xd.ndim != 2 or kd.ndim != 3 or xd.shape[1] != kd.shape[1]:
        raise DimensionError(
            f"conv1d shape mismatch: signal {x.shape} vs kernels {kernels.shape}")
    if stride < 1 or padding < 0:
        raise DimensionError(f"conv1d invalid stride={stride} padding={padding}")
    k = kd.shape[0]
    t_in = xd.shape[0] + 2 * padding
    if t_in < k:
        raise DimensionError(
            f"conv1d signal of length {xd.shape[0]} (+2*{padding} pad) shorter than kernel {k}")
    t_out = (t_in - k) // stride + 1
    xp = np.pad(xd, ((padding, padding), (0, 0))) if padding else xd
    out_data = np.zeros((t_out, kd.shape[2]), dtype=xd.dtype)
    for j in range(k):
        out_data += xp[j:j + (t_out - 1) * stride + 1:stride] @ kd[j]
    out = Tensor(out_data[:, 0] if squeeze else out_data)

    def bwd(g: np.ndarray) -> None:
        g2 = g[:, None] if g.ndim == 1 else g
        if x.requires_grad:
            gxp = np.zeros_like(xp)
            for j in range(k):
                gxp[j:j + (t_out - 1) * stride + 1:stride] += g2 @ kd[j].T
            gx = gxp[padding:xp.shape[0] - padding] if padding else gxp
            x.accumulate_grad(gx[:, 0] if x.ndim == 1 else gx)
        if kernels.requires_grad:
            gk = np.zeros_like(kd)
            for j in range(k):
                gk[j] = xp[j:j + (t_out - 1) * stride + 1:stride].T @ g2
            kernels.accumulate_grad(gk[:, 0, 0] if kernels.ndim == 1 else gk)

    return _record(out, (x, kernels), bwd)


def dropout(x: Tensor, rate: float, train_mode: bool,
            rng: np.random.Generator | None = None) -> Tensor:
    """Inverted dropout; the mask is a constant of the forward pass."""
    if not 0.0 <= rate < 1.0:
        raise ContractError(f"dropout rate must be in [0, 1), got {rate}")
    if rate == 0.0 or not train_mode:
        return x
    if rng is None:
        raise ContractError("dropout with rate > 0 in train mode needs an rng")
    mask = (rng.random(x.shape) >= rate) / (1.0 - rate)
    out = Tensor(x.data * mask)

    def bwd(g: np.ndarray) -> None:
        if x.requires_grad:
            x.accumulate_grad(g * mask)

    return _record(out, (x,), bwd)


# ---------------------------------------------------------------------------
# Serialization: "TNSR" | version u16 | rank u16 | extents u64* | float64 LE
# ---------------------------------------------------------------------------

TENSOR_MAGIC = b"TNSR"
TENSOR_VERSION = 1


def write_tensor(fh, t: Tensor) -> None:
    data = np.ascontiguousarray(t.data, dtype="<f8")
    fh.write(TENSOR_MAGIC)
    fh.write(struct.pack("<HH", TENSOR_VERSION, data.ndim))
    fh.write(struct.pack(f"<{data.ndim}Q", *data.shape))
    fh.write(data.tobytes())


def read_tensor(fh) -> Tensor:
    magic = fh.read(4)
    if magic != TENSOR_MAGIC:
        raise ContractError(f"bad tensor magic {magic!r}")
    version, rank = struct.unpack("<HH", fh.read(4))
    if version != TENSOR_VERSION:
        raise ContractError(f"unsupported tensor version {version}")
    shape = struct.unpack(f"<{rank}Q", fh.read(8 * rank)) if rank else ()
    count = int(np.prod(shape, dtype=np.int64)) if rank else 1
    payload = fh.read(8 * count)
    if len(payload) != 8 * count:
        raise ContractError("truncated tensor payload")
    data = np.frombuffer(payload, dtype="<f8").astype(np.float64).reshape(shape)
    return Tensor(data)


def save_tensor(path, t: Tensor) -> None:
    with open(path, "wb") as fh:
        write_tensor(fh, t)


def load_tensor(path) -> Tensor:
    with open(path, "rb") as fh:
        return read_tensor(fh)
