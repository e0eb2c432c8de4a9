"""Dense tensor primitives with tape-based reverse-mode differentiation.

Everything downstream (attention stacks, quantizer, losses, probes) is built
from the small op set in this module. Arrays are dense, row-major numpy
buffers; gradients are accumulated by replaying a recording tape in reverse
order. Two precision modes exist: float32 (training default) and float64
(finite-difference checking), switched globally via :func:`precision`.
"""

from __future__ import annotations

import contextlib
from typing import Callable, Iterable, Sequence

import numpy as np

__all__ = [
    "NumericalError",
    "Tensor",
    "Tape",
    "precision",
    "set_precision",
    "default_dtype",
    "as_tensor",
    "tensor",
    "zeros",
    "add",
    "sub",
    "mul",
    "matmul",
    "linear",
    "reshape",
    "swapaxes",
    "reduce_sum",
    "reduce_mean",
    "relu",
    "absolute",
    "softmax_rows",
    "log_softmax_rows",
    "layer_norm",
    "window_stack",
    "slice_frames",
    "gather_rows",
    "pick_per_row",
    "segment_mean",
    "straight_through",
    "detach",
    "backward",
    "check_gradients",
]


class NumericalError(ArithmeticError):
    """Raised when a computation produces non-finite values."""


_DTYPE = np.dtype(np.float32)

_MODES = {"float32": np.dtype(np.float32), "float64": np.dtype(np.float64)}


def default_dtype() -> np.dtype:
    """Dtype used for all tensors created in the current precision mode."""
    return _DTYPE


def set_precision(mode: str) -> None:
    global _DTYPE
    if mode not in _MODES:
        raise ValueError(f"unknown precision mode {mode!r}; expected one of {sorted(_MODES)}")
    _DTYPE = _MODES[mode]


@contextlib.contextmanager
def precision(mode: str):
    """Temporarily switch the global precision mode ("float32" or "float64")."""
    global _DTYPE
    previous = _DTYPE
    set_precision(mode)
    try:
        yield
    finally:
        _DTYPE = previous


class Tensor:
    """A dense array plus an optional gradient buffer of identical shape."""

    __slots__ = ("data", "requires_grad", "grad", "_tape")

    def __init__(self, data, requires_grad: bool = False):
        arr = np.asarray(data)
        if arr.dtype != _DTYPE:
            arr = arr.astype(_DTYPE)
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self._tape: "Tape | None" = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def item(self) -> float:
        return float(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.data.shape}{flag})"

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(as_tensor(other), self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)


def as_tensor(value) -> Tensor:
    if isinstance(value, Tensor):
        return value
    return Tensor(value)


def tensor(data, requires_grad: bool = False) -> Tensor:
    return Tensor(data, requires_grad=requires_grad)


def zeros(shape, requires_grad: bool = False) -> Tensor:
    return Tensor(np.zeros(shape, dtype=_DTYPE), requires_grad=requires_grad)


class Tape:
    """Ordered record of operations for one reverse pass.

    Ops append in execution order, so reversing the list is a valid reverse
    topological order. A tape can be replayed backward exactly once.
    """

    def __init__(self):
        self._ops: list[tuple[Tensor, tuple[Tensor, ...], Callable]] = []
        self._spent = False

    def __enter__(self) -> "Tape":
        _push_tape(self)
        return self

    def __exit__(self, *exc) -> None:
        _pop_tape(self)

    def record(self, out: Tensor, inputs: tuple[Tensor, ...], grad_fn: Callable) -> None:
        out._tape = self
        self._ops.append((out, inputs, grad_fn))

    def backward(self, loss: Tensor) -> None:
        if self._spent:
            raise RuntimeError("tape has already been replayed; re-record before calling backward again")
        self._spent = True
        if loss.data.shape != ():
            raise ValueError(f"backward expects a scalar loss, got shape {loss.data.shape}")
        if loss._tape is not self:
            raise ValueError("loss was not produced through operations recorded on this tape")
        grads: dict[int, np.ndarray] = {id(loss): np.ones((), dtype=loss.data.dtype)}
        for out, inputs, grad_fn in reversed(self._ops):
            g = grads.pop(id(out), None)
            if g is None:
                continue
            for inp, piece in zip(inputs, grad_fn(g)):
                if piece is None or not inp.requires_grad:
                    continue
                key = id(inp)
                if key in grads:
                    grads[key] = grads[key] + piece
                else:
                    grads[key] = piece
        # Flush accumulated grads; recorded-but-unreached tensors get zeros.
        seen: dict[int, Tensor] = {}
        for out, inputs, _ in self._ops:
            for t in (out, *inputs):
                if t.requires_grad:
                    seen[id(t)] = t
        for key, t in seen.items():
            piece = grads.get(key)
            if piece is None:
                piece = np.zeros_like(t.data)
            else:
                piece = np.broadcast_to(piece, t.data.shape).astype(t.data.dtype, copy=False)
            t.grad = piece if t.grad is None else t.grad + piece


_TAPE_STACK: list[Tape] = []


def _push_tape(tape: Tape) -> None:
    _TAPE_STACK.append(tape)


def _pop_tape(tape: Tape) -> None:
    if not _TAPE_STACK or _TAPE_STACK[-1] is not tape:
        raise RuntimeError("tape stack corrupted: exiting a tape that is not innermost")
    _TAPE_STACK.pop()


def _active_tape() -> Tape | None:
    return _TAPE_STACK[-1] if _TAPE_STACK else None


def backward(loss: Tensor) -> None:
    """Populate ``grad`` on every participating requires-grad tensor."""
    if loss.data.shape != ():
        raise ValueError(f"backward expects a scalar loss, got shape {loss.data.shape}")
    if loss._tape is None:
        raise ValueError("loss was not produced through recorded operations (no active tape?)")
    loss._tape.backward(loss)


def _make(data: np.ndarray, inputs: tuple[Tensor, ...], grad_fn: Callable) -> Tensor:
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    out._tape = None
    out.requires_grad = any(t.requires_grad for t in inputs)
    if out.requires_grad:
        tape = _active_tape()
        if tape is not None:
            tape.record(out, inputs, grad_fn)
    return out


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, (gs, ss) in enumerate(zip(g.shape, shape)) if ss == 1 and gs != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out = a.data + b.data

    def grad_fn(g):
        return _unbroadcast(g, a.data.shape), _unbroadcast(g, b.data.shape)

    return _make(out, (a, b), grad_fn)


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out = a.data - b.data

    def grad_fn(g):
        return _unbroadcast(g, a.data.shape), _unbroadcast(-g, b.data.shape)

    return _make(out, (a, b), grad_fn)


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out = a.data * b.data

    def grad_fn(g):
        return _unbroadcast(g * b.data, a.data.shape), _unbroadcast(g * a.data, b.data.shape)

    return _make(out, (a, b), grad_fn)


def matmul(a: Tensor, b: Tensor) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2:
        raise ValueError("matmul expects operands with ndim >= 2")
    if a.ndim != b.ndim:
        raise ValueError(f"matmul operands must have equal ndim, got {a.ndim} and {b.ndim}")
    if a.ndim > 2 and a.data.shape[:-2] != b.data.shape[:-2]:
        raise ValueError(
            f"matmul batch dims must match exactly, got {a.data.shape[:-2]} and {b.data.shape[:-2]}"
        )
    out = np.matmul(a.data, b.data)

    def grad_fn(g):
        ga = np.matmul(g, b.data.swapaxes(-1, -2))
        gb = np.matmul(a.data.swapaxes(-1, -2), g)
        return ga, gb

    return _make(out, (a, b), grad_fn)


def linear(x: Tensor, weight: Tensor, bias: Tensor | None = None) -> Tensor:
    """Affine map over the last axis: ``x @ weight (+ bias)`` for any leading dims."""
    lead = x.shape[:-1]
    flat = reshape(x, (-1, x.shape[-1]))
    out = matmul(flat, weight)
    out = reshape(out, (*lead, weight.shape[-1]))
    if bias is not None:
        out = add(out, bias)
    return out


def reshape(x: Tensor, shape) -> Tensor:
    x = as_tensor(x)
    out = x.data.reshape(shape)
    orig = x.data.shape

    def grad_fn(g):
        return (g.reshape(orig),)

    return _make(out, (x,), grad_fn)


def swapaxes(x: Tensor, a: int, b: int) -> Tensor:
    x = as_tensor(x)
    out = x.data.swapaxes(a, b)

    def grad_fn(g):
        return (g.swapaxes(a, b),)

    return _make(np.ascontiguousarray(out), (x,), grad_fn)


def reduce_sum(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    x = as_tensor(x)
    out = x.data.sum(axis=axis, keepdims=keepdims)

    def grad_fn(g):
        if axis is None:
            return (np.broadcast_to(g, x.data.shape).astype(x.data.dtype, copy=False),)
        gg = g
        if not keepdims:
            gg = np.expand_dims(gg, axis)
        return (np.broadcast_to(gg, x.data.shape).astype(x.data.dtype, copy=False),)

    return _make(out, (x,), grad_fn)


def reduce_mean(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    x = as_tensor(x)
    count = x.data.size if axis is None else x.data.shape[axis]
    summed = reduce_sum(x, axis=axis, keepdims=keepdims)
    return mul(summed, 1.0 / count)


def relu(x: Tensor) -> Tensor:
    x = as_tensor(x)
    out = np.maximum(x.data, 0)

    def grad_fn(g):
        return (g * (x.data > 0),)

    return _make(out, (x,), grad_fn)


def absolute(x: Tensor) -> Tensor:
    x = as_tensor(x)
    out = np.abs(x.data)

    def grad_fn(g):
        return (g * np.sign(x.data),)

    return _make(out, (x,), grad_fn)


def _coerce_mask(x: Tensor, mask) -> np.ndarray | None:
    if mask is None:
        return None
    m = mask.data if isinstance(mask, Tensor) else np.asarray(mask)
    if m.shape != x.data.shape:
        raise ValueError(f"mask shape {m.shape} does not match input shape {x.data.shape}")
    return m.astype(bool)


def softmax_rows(x: Tensor, mask=None) -> Tensor:
    """Softmax over the last axis, skipping masked entries.

    ``mask`` flags entries to exclude (True = masked out). Masked entries are
    exactly zero in the output; rows with no unmasked entry come back as all
    zeros, which is how zero-padded attention windows at sequence start are
    represented.
    """
    x = as_tensor(x)
    m = _coerce_mask(x, mask)
    if m is None:
        shifted = x.data - x.data.max(axis=-1, keepdims=True)
        e = np.exp(shifted)
        y = e / e.sum(axis=-1, keepdims=True)
    else:
        valid = ~m
        any_valid = valid.any(axis=-1, keepdims=True)
        neg = np.array(-np.inf, dtype=x.data.dtype)
        xmax = np.where(valid, x.data, neg).max(axis=-1, keepdims=True)
        xmax = np.where(any_valid, xmax, x.data.dtype.type(0))
        e = np.exp(np.where(valid, x.data - xmax, x.data.dtype.type(0))) * valid
        denom = e.sum(axis=-1, keepdims=True)
        y = e / np.where(denom == 0, 1, denom)
    y = y.astype(x.data.dtype, copy=False)

    def grad_fn(g):
        inner = (g * y).sum(axis=-1, keepdims=True)
        return (y * (g - inner),)

    return _make(y, (x,), grad_fn)


def log_softmax_rows(x: Tensor) -> Tensor:
    x = as_tensor(x)
    shifted = x.data - x.data.max(axis=-1, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=-1, keepdims=True))
    out = shifted - lse
    soft = np.exp(out)

    def grad_fn(g):
        return (g - soft * g.sum(axis=-1, keepdims=True),)

    return _make(out.astype(x.data.dtype, copy=False), (x,), grad_fn)


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalize the last axis to zero mean / unit variance, then scale and shift."""
    x, gain, bias = as_tensor(x), as_tensor(gain), as_tensor(bias)
    mu = x.data.mean(axis=-1, keepdims=True)
    var = x.data.var(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + x.data.dtype.type(eps))
    xhat = (x.data - mu) * inv
    out = xhat * gain.data + bias.data

    def grad_fn(g):
        lead = tuple(range(g.ndim - 1))
        dgain = (g * xhat).sum(axis=lead)
        dbias = g.sum(axis=lead)
        dxhat = g * gain.data
        dx = inv * (
            dxhat
            - dxhat.mean(axis=-1, keepdims=True)
            - xhat * (dxhat * xhat).mean(axis=-1, keepdims=True)
        )
        return dx, dgain, dbias

    return _make(out, (x, gain, bias), grad_fn)


def window_stack(x: Tensor, window: int) -> tuple[Tensor, np.ndarray]:
    """Rearrange an (n_f, D) sequence into (n_f, window, D) lookback rows.

    Row t holds frames [t-window+1 .. t] in order; slots that would reach
    before the first frame are zero vectors, flagged True in the returned
    padding mask. The source frame of row t is always the last slot.
    """
    x = as_tensor(x)
    if x.ndim != 2:
        raise ValueError(f"window_stack expects a 2-D sequence, got shape {x.shape}")
    if window < 1:
        raise ValueError("window must be >= 1")
    n_f = x.shape[0]
    idx = np.arange(n_f)[:, None] - (window - 1) + np.arange(window)[None, :]
    pad = idx < 0
    out = x.data[np.clip(idx, 0, None)]
    out[pad] = 0

    def grad_fn(g):
        gx = np.zeros_like(x.data)
        for j in range(window):
            off = window - 1 - j
            if off < n_f:
                gx[: n_f - off] += g[off:, j]
        return (gx,)

    return _make(out, (x,), grad_fn), pad


def slice_frames(x: Tensor, start: int, stop: int) -> Tensor:
    x = as_tensor(x)
    out = x.data[start:stop].copy()

    def grad_fn(g):
        gx = np.zeros_like(x.data)
        gx[start:stop] = g
        return (gx,)

    return _make(out, (x,), grad_fn)


def gather_rows(table: Tensor, indices: np.ndarray) -> Tensor:
    """Row lookup ``table[indices]``; gradients scatter-add back into the table."""
    table = as_tensor(table)
    idx = np.asarray(indices)
    out = table.data[idx]

    def grad_fn(g):
        gt = np.zeros_like(table.data)
        np.add.at(gt, idx, g)
        return (gt,)

    return _make(out, (table,), grad_fn)


def pick_per_row(x: Tensor, indices: np.ndarray) -> Tensor:
    """out[i] = x[i, indices[i]] for a 2-D input."""
    x = as_tensor(x)
    idx = np.asarray(indices)
    rows = np.arange(x.shape[0])
    out = x.data[rows, idx]

    def grad_fn(g):
        gx = np.zeros_like(x.data)
        gx[rows, idx] = g
        return (gx,)

    return _make(out, (x,), grad_fn)


def segment_mean(x: Tensor, bounds: Sequence[tuple[int, int]]) -> Tensor:
    """Broadcast the mean of each [start, end) row block back over its frames."""
    x = as_tensor(x)
    out = np.empty_like(x.data)
    for start, end in bounds:
        out[start:end] = x.data[start:end].mean(axis=0)

    def grad_fn(g):
        gx = np.empty_like(x.data)
        for start, end in bounds:
            gx[start:end] = g[start:end].sum(axis=0) / (end - start)
        return (gx,)

    return _make(out, (x,), grad_fn)


def straight_through(x: Tensor, values: np.ndarray) -> Tensor:
    """Forward to ``values``; route the incoming gradient to ``x`` unchanged."""
    x = as_tensor(x)
    vals = np.asarray(values, dtype=x.data.dtype)
    if vals.shape != x.data.shape:
        raise ValueError(f"straight_through value shape {vals.shape} != input shape {x.data.shape}")

    def grad_fn(g):
        return (g,)

    return _make(vals.copy(), (x,), grad_fn)


def detach(x: Tensor) -> Tensor:
    """Stop-gradient: identity forward, zero derivative."""
    x = as_tensor(x)
    return Tensor(x.data.copy())


def check_gradients(f: Callable[[Tensor], Tensor], point: Tensor, h: float = 1e-5) -> float:
    """Compare tape gradients of a scalar function against central differences.

    Returns max over coordinates of |analytic - numeric| / max(1, |numeric|).
    Run under float64 precision; float32 round-off swamps the h^2 error term.
    """
    probe = Tensor(point.data.copy(), requires_grad=True)
    with Tape() as tape:
        out = f(probe)
    if not np.all(np.isfinite(out.data)):
        raise NumericalError("function returned non-finite output at the evaluation point")
    if out.requires_grad:
        tape.backward(out)
    analytic = probe.grad if probe.grad is not None else np.zeros_like(probe.data)

    flat = probe.data.reshape(-1)
    numeric = np.zeros_like(flat)
    for i in range(flat.size):
        for sign, slot in ((+1, 0), (-1, 1)):
            shifted = flat.copy()
            shifted[i] += sign * h
            val = f(Tensor(shifted.reshape(probe.data.shape))).data
            if not np.all(np.isfinite(val)):
                raise NumericalError("function returned non-finite output during perturbation")
            if slot == 0:
                upper = float(val)
            else:
                numeric[i] = (upper - float(val)) / (2.0 * h)
    numeric = numeric.reshape(probe.data.shape)
    err = np.abs(analytic - numeric) / np.maximum(1.0, np.abs(numeric))
    return float(err.max()) if err.size else 0.0


def finite_or_raise(arr: np.ndarray, context: str) -> None:
    if not np.all(np.isfinite(arr)):
        raise NumericalError(f"non-finite values in {context}")
