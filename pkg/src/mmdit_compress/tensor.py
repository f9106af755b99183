"""Dense tensors with tape-based reverse-mode differentiation.

Values live in numpy arrays (float32 unless built from float64 data).  An op
records itself on the innermost active :class:`Tape` when at least one input
requires a gradient; outside any tape nothing is recorded, so inference pays
no bookkeeping cost.

    with Tape() as tape:
        loss = mse(linear(x, w, b), y)
    tape.backward(loss)
    w.grad  # dloss/dw

Broadcasting is deliberately limited to scalar-with-tensor.  Row-wise bias
and per-sample modulation are explicit ops (``linear``, ``modulate``,
``gated_residual``) so shape mistakes fail loudly.
"""

from __future__ import annotations

import itertools
import threading
from typing import Callable, Sequence

import numpy as np

_uids = itertools.count()
_local = threading.local()


class ShapeError(ValueError):
    pass


class NumericError(FloatingPointError):
    pass


class TapeError(RuntimeError):
    pass


def _as_array(data, dtype=None) -> np.ndarray:
    # float64 ndarrays keep their precision (used by gradient checks); anything else is float32
    keep64 = isinstance(data, np.ndarray) and data.dtype == np.float64
    arr = np.asarray(data)
    if dtype is None:
        dtype = np.float64 if keep64 else np.float32
    return np.ascontiguousarray(arr, dtype=dtype)


class Tensor:
    """A dense array with an optional gradient slot."""

    __slots__ = ("data", "grad", "requires_grad", "name", "uid")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None, dtype=None):
        self.data = _as_array(data, dtype)
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self.name = name
        self.uid = next(_uids)

    @property
    def shape(self) -> tuple[int, ...]:
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

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError(f"item() needs a single-element tensor, got shape {self.shape}")
        return float(self.data.reshape(()))

    def detach(self) -> "Tensor":
        return Tensor(self.data, requires_grad=False)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{tag}, requires_grad={self.requires_grad})"

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

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)


class _Entry:
    __slots__ = ("out", "inputs", "backward")

    def __init__(self, out: Tensor, inputs: tuple[Tensor, ...], backward: Callable):
        self.out = out
        self.inputs = inputs
        self.backward = backward


class Tape:
    """Ordered record of differentiable ops; the unit of one backward pass.

    A tape is owned by the thread that entered it.  Independent tapes in
    different threads share no state.
    """

    def __init__(self):
        self.entries: list[_Entry] = []

    def __enter__(self) -> "Tape":
        stack = getattr(_local, "stack", None)
        if stack is None:
            stack = _local.stack = []
        stack.append(self)
        return self

    def __exit__(self, *exc) -> None:
        _local.stack.pop()

    def __len__(self) -> int:
        return len(self.entries)

    def record(self, out: Tensor, inputs: tuple[Tensor, ...], backward: Callable) -> None:
        self.entries.append(_Entry(out, inputs, backward))

    def backward(self, loss: Tensor) -> None:
        """Populate ``.grad`` of every leaf tensor that requires a gradient.

        Leaf gradients accumulate into any existing ``.grad`` buffer.
        """
        if loss.size != 1:
            raise ShapeError(f"backward needs a scalar loss, got shape {loss.shape}")
        produced = {}
        for idx, entry in enumerate(self.entries):
            for inp in entry.inputs:
                if inp.uid >= entry.out.uid:
                    raise TapeError(
                        f"tape entry {idx} consumes tensor {inp.uid} created after its output {entry.out.uid}"
                    )
            produced[entry.out.uid] = idx
        if loss.uid not in produced:
            raise TapeError("loss was not produced on this tape")

        grads: dict[int, np.ndarray] = {loss.uid: np.ones_like(loss.data)}
        leaves: dict[int, Tensor] = {}
        for entry in reversed(self.entries):
            g = grads.pop(entry.out.uid, None)
            if g is None:
                continue
            in_grads = entry.backward(g)
            for inp, gi in zip(entry.inputs, in_grads):
                if gi is None or not inp.requires_grad:
                    continue
                if gi.shape != inp.shape:
                    raise ShapeError(f"gradient shape {gi.shape} does not match input shape {inp.shape}")
                prev = grads.get(inp.uid)
                grads[inp.uid] = gi if prev is None else prev + gi
                if inp.uid not in produced:
                    leaves[inp.uid] = inp
        for uid, leaf in leaves.items():
            g = grads[uid].astype(leaf.dtype, copy=False)
            leaf.grad = g if leaf.grad is None else leaf.grad + g


def active_tape() -> Tape | None:
    stack = getattr(_local, "stack", None)
    return stack[-1] if stack else None


def _wrap(x, like: Tensor | None = None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    dtype = like.dtype if like is not None else None
    return Tensor(np.asarray(x, dtype=dtype) if dtype is not None else x)


def _finish(data: np.ndarray, inputs: tuple[Tensor, ...], backward: Callable, op: str) -> Tensor:
    if not np.isfinite(data).all():
        raise NumericError(f"{op} produced non-finite values")
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    out.name = None
    out.uid = next(_uids)
    tape = active_tape()
    track = tape is not None and any(t.requires_grad for t in inputs)
    out.requires_grad = track
    if track:
        tape.record(out, inputs, backward)
    return out


def _is_scalar(t: Tensor) -> bool:
    return t.ndim == 0 or t.size == 1 and t.ndim <= 1


def _reduce_scalar(g: np.ndarray, t: Tensor) -> np.ndarray:
    return np.asarray(g.sum(), dtype=t.dtype).reshape(t.shape)


def _pair(a, b) -> tuple[Tensor, Tensor]:
    if isinstance(a, Tensor):
        return a, _wrap(b, like=a)
    b = _wrap(b)
    return _wrap(a, like=b), b


def _check_same(a: Tensor, b: Tensor, op: str) -> None:
    if a.shape != b.shape and not (_is_scalar(a) or _is_scalar(b)):
        raise ShapeError(f"{op}: shapes {a.shape} and {b.shape} do not match")


# ---------------------------------------------------------------- elementwise

def add(a, b) -> Tensor:
    a, b = _pair(a, b)
    _check_same(a, b, "add")

    def back(g):
        ga = _reduce_scalar(g, a) if a.shape != g.shape else g
        gb = _reduce_scalar(g, b) if b.shape != g.shape else g
        return ga, gb

    return _finish(a.data + b.data, (a, b), back, "add")


def sub(a, b) -> Tensor:
    a, b = _pair(a, b)
    _check_same(a, b, "sub")

    def back(g):
        ga = _reduce_scalar(g, a) if a.shape != g.shape else g
        gb = _reduce_scalar(-g, b) if b.shape != g.shape else -g
        return ga, gb

    return _finish(a.data - b.data, (a, b), back, "sub")


def mul(a, b) -> Tensor:
    a, b = _pair(a, b)
    _check_same(a, b, "mul")
    ad, bd = a.data, b.data
    out = ad * bd

    def back(g):
        ga, gb = g * bd, g * ad
        if a.shape != g.shape:
            ga = _reduce_scalar(ga, a)
        if b.shape != g.shape:
            gb = _reduce_scalar(gb, b)
        return ga, gb

    return _finish(out, (a, b), back, "mul")


def gelu(x: Tensor) -> Tensor:
    """tanh-approximated GELU."""
    xd = x.data
    c = xd.dtype.type(np.sqrt(2.0 / np.pi))
    k = xd.dtype.type(0.044715)
    x2 = xd * xd
    th = np.tanh(c * xd * (1 + k * x2))
    out = 0.5 * xd * (1 + th)

    def back(g):
        dinner = c * (1 + 3 * k * x2)
        return (g * (0.5 * (1 + th) + 0.5 * xd * (1 - th * th) * dinner),)

    return _finish(out, (x,), back, "gelu")


def silu(x: Tensor) -> Tensor:
    xd = x.data
    sig = 1.0 / (1.0 + np.exp(-xd))
    out = xd * sig

    def back(g):
        return (g * sig * (1.0 + xd * (1.0 - sig)),)

    return _finish(out, (x,), back, "silu")


# ---------------------------------------------------------------- linear algebra

def matmul(a, b) -> Tensor:
    """``(..., m, k) @ (k, n)`` or batched ``(..., m, k) @ (..., k, n)`` with equal batch dims."""
    a, b = _wrap(a), _wrap(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul: shapes {a.shape} and {b.shape} are not aligned")
    if b.ndim == 2:
        ad, bd = a.data, b.data

        def back(g):
            ga = g @ bd.T
            gb = ad.reshape(-1, ad.shape[-1]).T @ g.reshape(-1, g.shape[-1])
            return ga, gb

        return _finish(ad @ bd, (a, b), back, "matmul")
    if a.shape[:-2] != b.shape[:-2]:
        raise ShapeError(f"matmul: batch dims of {a.shape} and {b.shape} differ")
    ad, bd = a.data, b.data

    def back(g):
        return g @ np.swapaxes(bd, -1, -2), np.swapaxes(ad, -1, -2) @ g

    return _finish(ad @ bd, (a, b), back, "matmul")


def linear(x: Tensor, w: Tensor, b: Tensor | None = None) -> Tensor:
    """``x @ w + b`` with ``w`` of shape (k, n) and ``b`` of shape (n,)."""
    if x.shape[-1] != w.shape[0] or w.ndim != 2:
        raise ShapeError(f"linear: input {x.shape} incompatible with weight {w.shape}")
    if b is not None and b.shape != (w.shape[1],):
        raise ShapeError(f"linear: bias {b.shape} incompatible with weight {w.shape}")
    xd, wd = x.data, w.data
    x2 = xd.reshape(-1, xd.shape[-1])
    out = x2 @ wd
    if b is not None:
        out += b.data
    out = out.reshape(xd.shape[:-1] + (wd.shape[1],))

    def back(g):
        g2 = g.reshape(-1, g.shape[-1])
        gx = (g2 @ wd.T).reshape(xd.shape)
        gw = x2.T @ g2
        if b is None:
            return gx, gw
        return gx, gw, g2.sum(axis=0)

    inputs = (x, w) if b is None else (x, w, b)
    return _finish(out, inputs, back, "linear")


# ---------------------------------------------------------------- normalisation

def layernorm(x: Tensor, eps: float = 1e-6) -> Tensor:
    """Normalise over the last axis; no affine parameters."""
    xd = x.data
    mu = xd.mean(axis=-1, keepdims=True)
    xc = xd - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    rstd = 1.0 / np.sqrt(var + eps)
    xhat = xc * rstd

    def back(g):
        gm = g.mean(axis=-1, keepdims=True)
        gxm = (g * xhat).mean(axis=-1, keepdims=True)
        return (rstd * (g - gm - xhat * gxm),)

    return _finish(xhat.astype(xd.dtype, copy=False), (x,), back, "layernorm")


def softmax(x: Tensor) -> Tensor:
    """Softmax over the last axis."""
    xd = x.data
    e = np.exp(xd - xd.max(axis=-1, keepdims=True))
    s = e / e.sum(axis=-1, keepdims=True)

    def back(g):
        return (s * (g - (g * s).sum(axis=-1, keepdims=True)),)

    return _finish(s, (x,), back, "softmax")


def modulate(x: Tensor, shift: Tensor, scale: Tensor) -> Tensor:
    """``x * (1 + scale) + shift`` with per-sample (B, d) shift/scale over x (B, N, d)."""
    if x.ndim != 3 or shift.shape != (x.shape[0], x.shape[2]) or scale.shape != shift.shape:
        raise ShapeError(f"modulate: x {x.shape}, shift {shift.shape}, scale {scale.shape}")
    xd = x.data
    sc = 1.0 + scale.data[:, None, :]
    out = xd * sc + shift.data[:, None, :]

    def back(g):
        return g * sc, g.sum(axis=1), (g * xd).sum(axis=1)

    return _finish(out, (x, shift, scale), back, "modulate")


def add_positional(x: Tensor, table: Tensor) -> Tensor:
    """Add an (N, d) table to every sample of an (B, N, d) batch."""
    if x.ndim != 3 or table.shape != x.shape[1:]:
        raise ShapeError(f"add_positional: x {x.shape}, table {table.shape}")

    def back(g):
        return g, g.sum(axis=0)

    return _finish(x.data + table.data, (x, table), back, "add_positional")


def gated_residual(h: Tensor, gate: Tensor, f: Tensor) -> Tensor:
    """``h + gate * f`` with a per-sample (B, d) gate over (B, N, d) streams."""
    if h.shape != f.shape or h.ndim != 3 or gate.shape != (h.shape[0], h.shape[2]):
        raise ShapeError(f"gated_residual: h {h.shape}, gate {gate.shape}, f {f.shape}")
    gd = gate.data[:, None, :]
    fd = f.data
    out = h.data + gd * fd

    def back(g):
        return g, (g * fd).sum(axis=1), g * gd

    return _finish(out, (h, gate, f), back, "gated_residual")


# ---------------------------------------------------------------- shape ops

def reshape(x: Tensor, shape: Sequence[int]) -> Tensor:
    src = x.shape
    try:
        out = x.data.reshape(shape)
    except ValueError as err:
        raise ShapeError(f"reshape: cannot reshape {src} to {tuple(shape)}") from err

    def back(g):
        return (g.reshape(src),)

    return _finish(out, (x,), back, "reshape")


def transpose(x: Tensor, axes: Sequence[int]) -> Tensor:
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))
    out = np.ascontiguousarray(x.data.transpose(axes))

    def back(g):
        return (np.ascontiguousarray(g.transpose(inv)),)

    return _finish(out, (x,), back, "transpose")


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = tuple(tensors)
    nd = tensors[0].ndim
    ax = axis % nd
    for t in tensors[1:]:
        if t.ndim != nd or t.shape[:ax] + t.shape[ax + 1:] != tensors[0].shape[:ax] + tensors[0].shape[ax + 1:]:
            raise ShapeError(f"concat along axis {axis}: shapes {tensors[0].shape} and {t.shape} do not conform")
    sizes = [t.shape[ax] for t in tensors]
    out = np.concatenate([t.data for t in tensors], axis=ax)

    def back(g):
        return tuple(np.split(g, np.cumsum(sizes)[:-1], axis=ax))

    return _finish(out, tensors, back, "concat")


def slice_axis(x: Tensor, start: int, stop: int, axis: int = 0) -> Tensor:
    ax = axis % x.ndim
    if not 0 <= start <= stop <= x.shape[ax]:
        raise ShapeError(f"slice [{start}:{stop}] out of range for axis {axis} of shape {x.shape}")
    idx = (slice(None),) * ax + (slice(start, stop),)
    out = np.ascontiguousarray(x.data[idx])
    src_shape, dtype = x.shape, x.dtype

    def back(g):
        full = np.zeros(src_shape, dtype=dtype)
        full[idx] = g
        return (full,)

    return _finish(out, (x,), back, "slice")


def split(x: Tensor, sizes: Sequence[int], axis: int = 0) -> list[Tensor]:
    """Split into consecutive pieces of the given sizes; inverse of :func:`concat`."""
    ax = axis % x.ndim
    if sum(sizes) != x.shape[ax]:
        raise ShapeError(f"split sizes {list(sizes)} do not sum to axis {axis} of shape {x.shape}")
    pieces, start = [], 0
    for n in sizes:
        pieces.append(slice_axis(x, start, start + n, ax))
        start += n
    return pieces


def embedding(table: Tensor, ids) -> Tensor:
    """Row lookup ``table[ids]``."""
    ids = np.asarray(ids)
    if ids.dtype.kind not in "iu":
        raise TypeError("embedding ids must be integers")
    if ids.size and (ids.min() < 0 or ids.max() >= table.shape[0]):
        raise IndexError(f"token id out of range [0, {table.shape[0]})")
    out = table.data[ids]
    shape, dtype = table.shape, table.dtype

    def back(g):
        full = np.zeros(shape, dtype=dtype)
        np.add.at(full, ids.reshape(-1), g.reshape(-1, shape[1]))
        return (full,)

    return _finish(out, (table,), back, "embedding")


# ---------------------------------------------------------------- reductions

def sum_all(x: Tensor) -> Tensor:
    shape = x.shape

    def back(g):
        return (np.broadcast_to(g, shape).copy(),)

    return _finish(np.asarray(x.data.sum(), dtype=x.dtype), (x,), back, "sum")


def mean(x: Tensor) -> Tensor:
    shape, n = x.shape, x.size

    def back(g):
        return (np.full(shape, g / n, dtype=x.dtype),)

    return _finish(np.asarray(x.data.mean(), dtype=x.dtype), (x,), back, "mean")


def mse(a: Tensor, b) -> Tensor:
    """Mean of squared differences; ``b`` may be a plain array (treated as a constant)."""
    b = _wrap(b, like=a)
    if a.shape != b.shape:
        raise ShapeError(f"mse: shapes {a.shape} and {b.shape} do not match")
    diff = a.data - b.data
    n = diff.size

    def back(g):
        gd = (2.0 / n) * g * diff
        return gd.astype(a.dtype, copy=False), (-gd).astype(b.dtype, copy=False)

    return _finish(np.asarray((diff * diff).mean(), dtype=a.dtype), (a, b), back, "mse")


_BINARY = {"matmul": matmul, "add": add, "mul": mul, "mse": mse}
_UNARY = {"layernorm": layernorm, "softmax": softmax, "gelu": gelu, "mean": mean}


def op_set(a: Tensor, b=None, kind: str = "add", **kw):
    """Dispatch a named op.  ``concat`` takes ``b`` as the second operand,
    ``split`` takes ``b`` as the list of sizes."""
    if kind in _BINARY:
        return _BINARY[kind](a, b)
    if kind in _UNARY:
        return _UNARY[kind](a)
    if kind == "concat":
        return concat([a, b], axis=kw.get("axis", 0))
    if kind == "split":
        return split(a, b, axis=kw.get("axis", 0))
    raise ValueError(f"unknown op kind {kind!r}")
