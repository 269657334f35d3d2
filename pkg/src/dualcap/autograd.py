"""Dense float64 tensors with tape-based reverse-mode differentiation.

Every value flowing through the models is a :class:`Tensor` wrapping a
``numpy`` float64 array.  Operations executed inside a ``with Tape():``
block append one record each (inputs, output, backward rule) to the
active tape; :func:`backward` replays the tape once in reverse, summing
gradients wherever a tensor fans out into several consumers.  Outside a
tape block the same functions run as plain numpy compute, which is how
generation and evaluation avoid graph bookkeeping.

Shapes are strict: no implicit broadcasting anywhere except
:func:`add_bias`, which adds a length-C vector to every row of a T x C
matrix.  A tape and the tensors recorded on it belong to one thread.
"""

from __future__ import annotations

import math
from typing import Callable, Sequence

import numpy as np
from scipy.special import erf

from . import flops
from .errors import ContractError, ShapeError

Array = np.ndarray

LOG_FLOOR = 1e-12  # probabilities are clamped here before the log
MASK_VALUE = -1e30  # additive mask; exp(-1e30) underflows to exactly 0.0
_INV_SQRT2 = 1.0 / math.sqrt(2.0)
_INV_SQRT_2PI = 1.0 / math.sqrt(2.0 * math.pi)


class Tensor:
    """A float64 array plus the gradient machinery attached to it.

    ``data`` is owned by the tensor and must not be mutated while a tape
    that saw the tensor is still alive (the optimizer mutates parameter
    data between steps, after the step's tape has been discarded).
    ``grad`` starts as None and accumulates across backward passes until
    :func:`zero_grads` clears it.
    """

    __slots__ = ("data", "requires_grad", "grad", "tape")

    def __init__(self, data, requires_grad: bool = False):
        arr = np.array(data, dtype=np.float64)
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad: Array | None = None
        self.tape: Tape | None = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError(f"item() needs a single-element tensor, got shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def detach(self) -> "Tensor":
        return Tensor(self.data.copy())

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag})"

    def __matmul__(self, other: "Tensor") -> "Tensor":
        return matmul(self, other)

    def __add__(self, other: "Tensor") -> "Tensor":
        return add(self, other)

    def __sub__(self, other: "Tensor") -> "Tensor":
        return sub(self, other)

    def __mul__(self, other: "Tensor") -> "Tensor":
        return mul(self, other)


class _Record:
    __slots__ = ("output", "inputs", "grad_fn")

    def __init__(self, output: Tensor, inputs: tuple[Tensor, ...], grad_fn):
        self.output = output
        self.inputs = inputs
        self.grad_fn = grad_fn


class Tape:
    """Ordered log of operations; backward() replays it exactly once.

    Records are appended in execution order, so every record's inputs
    were produced earlier on the tape and a single reverse sweep in
    :func:`backward` visits each operation once with its output gradient
    fully accumulated.
    """

    _active: "Tape | None" = None

    def __init__(self):
        self._records: list[_Record] = []
        self._outer: Tape | None = None

    def __enter__(self) -> "Tape":
        self._outer = Tape._active
        Tape._active = self
        return self

    def __exit__(self, exc_type, exc, tb) -> None:
        Tape._active = self._outer
        self._outer = None

    def __len__(self) -> int:
        return len(self._records)

    def backward(self, root: Tensor) -> None:
        if root.size != 1:
            raise ContractError(f"backward root must be scalar, got shape {root.shape}")
        if root.tape is not self:
            raise ContractError("backward root was not recorded on this tape")
        grads: dict[int, Array] = {id(root): np.ones_like(root.data)}
        holders: dict[int, Tensor] = {id(root): root}
        for rec in reversed(self._records):
            g_out = grads.get(id(rec.output))
            if g_out is None:
                continue
            for tensor, g_in in zip(rec.inputs, rec.grad_fn(g_out)):
                if g_in is None or not tensor.requires_grad:
                    continue
                key = id(tensor)
                if key in grads:
                    grads[key] = grads[key] + g_in
                else:
                    grads[key] = g_in
                    holders[key] = tensor
        for key, tensor in holders.items():
            if tensor.requires_grad:
                g = grads[key]
                tensor.grad = g if tensor.grad is None else tensor.grad + g


def backward(root: Tensor) -> None:
    """Populate .grad on every requires_grad tensor reachable from root."""
    if root.tape is None:
        raise ContractError("backward root is not on any tape (was it computed inside 'with Tape():'?)")
    root.tape.backward(root)


def zero_grads(tensors: Sequence[Tensor]) -> None:
    for t in tensors:
        t.grad = None


def _record(output: Tensor, inputs: tuple[Tensor, ...], grad_fn) -> Tensor:
    tape = Tape._active
    if tape is not None and any(t.requires_grad for t in inputs):
        output.requires_grad = True
        output.tape = tape
        tape._records.append(_Record(output, inputs, grad_fn))
    return output


def _require_same_shape(op: str, a: Tensor, b: Tensor) -> None:
    if a.shape != b.shape:
        raise ShapeError(f"{op}: shapes differ: {a.shape} vs {b.shape}")


# ---------------------------------------------------------------------------
# arithmetic


def add(a: Tensor, b: Tensor) -> Tensor:
    _require_same_shape("add", a, b)
    out = Tensor(a.data + b.data)
    return _record(out, (a, b), lambda g: (g, g))


def sub(a: Tensor, b: Tensor) -> Tensor:
    _require_same_shape("sub", a, b)
    out = Tensor(a.data - b.data)
    return _record(out, (a, b), lambda g: (g, -g))


def mul(a: Tensor, b: Tensor) -> Tensor:
    _require_same_shape("mul", a, b)
    out = Tensor(a.data * b.data)
    return _record(out, (a, b), lambda g: (g * b.data, g * a.data))


def scale(x: Tensor, factor: float) -> Tensor:
    c = float(factor)
    out = Tensor(x.data * c)
    return _record(out, (x,), lambda g: (g * c,))


def scale_by(x: Tensor, s: Tensor) -> Tensor:
    """Multiply every element of x by the single-element tensor s."""
    if s.size != 1:
        raise ShapeError(f"scale_by: scale must be a single element, got shape {s.shape}")
    sval = float(s.data.reshape(-1)[0])
    out = Tensor(x.data * sval)

    def grad_fn(g: Array):
        return g * sval, np.array([np.sum(g * x.data)]).reshape(s.shape)

    return _record(out, (x, s), grad_fn)


def add_bias(x: Tensor, b: Tensor) -> Tensor:
    """Add a length-C bias vector to every row of a T x C matrix.

    This is the only broadcasting operation in the package.
    """
    if x.data.ndim != 2 or b.data.ndim != 1 or x.shape[1] != b.shape[0]:
        raise ShapeError(f"add_bias: need (T, C) plus (C,), got {x.shape} and {b.shape}")
    out = Tensor(x.data + b.data[None, :])
    return _record(out, (x, b), lambda g: (g, g.sum(axis=0)))


def exp(x: Tensor) -> Tensor:
    out = Tensor(np.exp(x.data))
    return _record(out, (x,), lambda g: (g * out.data,))


def reciprocal(x: Tensor) -> Tensor:
    if np.any(x.data == 0.0):
        raise ContractError("reciprocal: input contains zero")
    out = Tensor(1.0 / x.data)
    return _record(out, (x,), lambda g: (-g * out.data * out.data,))


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.data.ndim != 2 or b.data.ndim != 2:
        raise ShapeError(f"matmul: both operands must be 2-D, got {a.shape} and {b.shape}")
    if a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: inner dimensions differ: {a.shape} vs {b.shape}")
    m, k = a.shape
    n = b.shape[1]
    flops.add_matmul(m, k, n)
    out = Tensor(a.data @ b.data)
    return _record(out, (a, b), lambda g: (g @ b.data.T, a.data.T @ g))


# ---------------------------------------------------------------------------
# shape manipulation


def transpose(x: Tensor) -> Tensor:
    if x.data.ndim != 2:
        raise ShapeError(f"transpose: expected 2-D, got {x.shape}")
    out = Tensor(x.data.T)
    return _record(out, (x,), lambda g: (g.T,))


def reshape(x: Tensor, shape: Sequence[int]) -> Tensor:
    shape = tuple(int(s) for s in shape)
    if math.prod(shape) != x.size:
        raise ShapeError(f"reshape: cannot view {x.shape} as {shape}")
    out = Tensor(x.data.reshape(shape))
    return _record(out, (x,), lambda g: (g.reshape(x.shape),))


def concat(tensors: Sequence[Tensor], axis: int) -> Tensor:
    if not tensors:
        raise ContractError("concat: need at least one tensor")
    ndim = tensors[0].data.ndim
    for t in tensors[1:]:
        if t.data.ndim != ndim:
            raise ShapeError(f"concat: ranks differ: {tensors[0].shape} vs {t.shape}")
    if axis < 0 or axis >= ndim:
        raise ShapeError(f"concat: axis {axis} out of range for rank {ndim}")
    ref = list(tensors[0].shape)
    for t in tensors[1:]:
        other = list(t.shape)
        if ref[:axis] + ref[axis + 1:] != other[:axis] + other[axis + 1:]:
            raise ShapeError(f"concat: shapes differ off-axis: {tensors[0].shape} vs {t.shape}")
    out = Tensor(np.concatenate([t.data for t in tensors], axis=axis))
    sizes = [t.shape[axis] for t in tensors]

    def grad_fn(g: Array):
        pieces = []
        start = 0
        for s in sizes:
            index = [np.s_[:]] * ndim
            index[axis] = np.s_[start:start + s]
            pieces.append(g[tuple(index)])
            start += s
        return tuple(pieces)

    return _record(out, tuple(tensors), grad_fn)


def slice_axis(x: Tensor, axis: int, start: int, stop: int) -> Tensor:
    """Contiguous slice [start, stop) along one axis."""
    ndim = x.data.ndim
    if axis < 0 or axis >= ndim:
        raise ShapeError(f"slice_axis: axis {axis} out of range for rank {ndim}")
    if not (0 <= start < stop <= x.shape[axis]):
        raise ShapeError(f"slice_axis: range [{start}, {stop}) invalid for axis of size {x.shape[axis]}")
    index = [np.s_[:]] * ndim
    index[axis] = np.s_[start:stop]
    index = tuple(index)
    out = Tensor(x.data[index])

    def grad_fn(g: Array):
        full = np.zeros_like(x.data)
        full[index] = g
        return (full,)

    return _record(out, (x,), grad_fn)


def take_rows(x: Tensor, indices: Sequence[int]) -> Tensor:
    """Gather rows of a 2-D tensor; duplicate indices sum in the backward."""
    if x.data.ndim != 2:
        raise ShapeError(f"take_rows: expected 2-D, got {x.shape}")
    idx = np.asarray(indices, dtype=np.intp)
    if idx.ndim != 1:
        raise ShapeError(f"take_rows: indices must be 1-D, got shape {idx.shape}")
    if idx.size and (idx.min() < 0 or idx.max() >= x.shape[0]):
        raise ShapeError(f"take_rows: index out of range for {x.shape[0]} rows")
    out = Tensor(x.data[idx])

    def grad_fn(g: Array):
        full = np.zeros_like(x.data)
        np.add.at(full, idx, g)
        return (full,)

    return _record(out, (x,), grad_fn)


def embedding_lookup(table: Tensor, ids: Sequence[int]) -> Tensor:
    """Rows of the embedding table for a sequence of token ids."""
    return take_rows(table, ids)


# ---------------------------------------------------------------------------
# reductions and nonlinearities


def mean(x: Tensor, axis: int | None = None) -> Tensor:
    if axis is None:
        out = Tensor(np.array([x.data.mean()]))
        n = x.size

        def grad_fn(g: Array):
            return (np.full_like(x.data, g.reshape(-1)[0] / n),)

        return _record(out, (x,), grad_fn)
    if axis < 0 or axis >= x.data.ndim:
        raise ShapeError(f"mean: axis {axis} out of range for rank {x.data.ndim}")
    count = x.shape[axis]
    out = Tensor(x.data.mean(axis=axis))

    def grad_fn_axis(g: Array):
        return (np.repeat(np.expand_dims(g / count, axis), count, axis=axis),)

    return _record(out, (x,), grad_fn_axis)


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    """Row-stochastic softmax with max subtraction for stability."""
    shifted = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    s = e / e.sum(axis=axis, keepdims=True)
    out = Tensor(s)

    def grad_fn(g: Array):
        dot = (g * s).sum(axis=axis, keepdims=True)
        return (s * (g - dot),)

    return _record(out, (x,), grad_fn)


def gelu(x: Tensor) -> Tensor:
    """Exact Gaussian error linear unit, 0.5 * x * (1 + erf(x / sqrt(2)))."""
    e = erf(x.data * _INV_SQRT2)
    out = Tensor(0.5 * x.data * (1.0 + e))

    def grad_fn(g: Array):
        pdf = np.exp(-0.5 * x.data * x.data) * _INV_SQRT_2PI
        return (g * (0.5 * (1.0 + e) + x.data * pdf),)

    return _record(out, (x,), grad_fn)


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalize the last axis to zero mean, unit variance; then scale and shift.

    eps sits inside the square root.  gain and bias are length-C vectors
    applied to every row.
    """
    if x.data.ndim not in (1, 2):
        raise ShapeError(f"layer_norm: expected 1-D or 2-D input, got {x.shape}")
    c = x.shape[-1]
    if gain.shape != (c,) or bias.shape != (c,):
        raise ShapeError(f"layer_norm: gain/bias must be ({c},), got {gain.shape} and {bias.shape}")
    mu = x.data.mean(axis=-1, keepdims=True)
    var = x.data.var(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = (x.data - mu) * inv
    out = Tensor(xhat * gain.data + bias.data)

    def grad_fn(g: Array):
        gy = g * gain.data
        m1 = gy.mean(axis=-1, keepdims=True)
        m2 = (gy * xhat).mean(axis=-1, keepdims=True)
        dx = inv * (gy - m1 - xhat * m2)
        axes = tuple(range(x.data.ndim - 1))
        dgain = (g * xhat).sum(axis=axes) if axes else g * xhat
        dbias = g.sum(axis=axes) if axes else g
        return dx, dgain, dbias

    return _record(out, (x, gain, bias), grad_fn)


def l2_normalize(x: Tensor, eps: float = 1e-12) -> Tensor:
    """Scale each row (or a 1-D vector) to unit Euclidean norm."""
    if x.data.ndim not in (1, 2):
        raise ShapeError(f"l2_normalize: expected 1-D or 2-D input, got {x.shape}")
    norm = np.sqrt((x.data * x.data).sum(axis=-1, keepdims=True) + eps)
    out = Tensor(x.data / norm)

    def grad_fn(g: Array):
        dot = (g * out.data).sum(axis=-1, keepdims=True)
        return ((g - out.data * dot) / norm,)

    return _record(out, (x,), grad_fn)


def cross_entropy(logits: Tensor, target_ids: Sequence[int], ignore_id: int | None = None) -> Tensor:
    """Mean negative log-likelihood of target_ids under row-wise softmax.

    Rows whose target equals ignore_id are dropped from the mean.  The
    target probability is clamped at 1e-12 before the log; a clamped row
    contributes a constant to the loss and zero gradient.
    """
    if logits.data.ndim != 2:
        raise ShapeError(f"cross_entropy: logits must be 2-D, got {logits.shape}")
    targets = np.asarray(target_ids, dtype=np.intp)
    t, v = logits.shape
    if targets.shape != (t,):
        raise ShapeError(f"cross_entropy: need {t} targets for logits {logits.shape}, got {targets.shape}")
    keep = np.ones(t, dtype=bool) if ignore_id is None else targets != ignore_id
    if not keep.any():
        raise ContractError("cross_entropy: every row is ignored")
    valid = targets[keep]
    if valid.min() < 0 or valid.max() >= v:
        raise ContractError(f"cross_entropy: target id out of range for {v} classes")

    shifted = logits.data - logits.data.max(axis=1, keepdims=True)
    log_z = np.log(np.exp(shifted).sum(axis=1, keepdims=True))
    log_probs = shifted - log_z
    rows = np.arange(t)
    picked = log_probs[rows, np.clip(targets, 0, v - 1)]
    floor = math.log(LOG_FLOOR)
    clamped = picked < floor
    picked = np.maximum(picked, floor)
    n_kept = int(keep.sum())
    loss = -picked[keep].mean()
    out = Tensor(np.array([loss]))

    def grad_fn(g: Array):
        gval = g.reshape(-1)[0]
        soft = np.exp(log_probs)
        dlogits = soft.copy()
        dlogits[rows, np.clip(targets, 0, v - 1)] -= 1.0
        dlogits[~keep] = 0.0
        dlogits[clamped & keep] = 0.0
        return (dlogits * (gval / n_kept),)

    return _record(out, (logits,), grad_fn)
