"""
Dense tensors with a reverse-mode tape, the optimizers, and the
finite-difference gradient oracle.

Usage:
    with Tape() as tape:
        loss = bce_with_logits(logits, targets)
    tape.backward(loss)
    adam_step(params, state)

Operations record onto the active tape only when one of their inputs
requires a gradient. Without an active tape nothing is recorded and outputs
never require gradients, so plain forwards (evaluation, finite differences)
cost nothing extra.
"""

from __future__ import annotations

import logging
import math
import threading
from contextlib import contextmanager
from dataclasses import dataclass, field
from typing import Callable, Dict, Iterator, List, Mapping, Optional, Sequence, Tuple

import numpy as np

from .errors import MissingGradientError, ShapeError, VocabularyError

logger = logging.getLogger(__name__)

DEFAULT_DTYPE = np.float32
LAYER_NORM_EPS = 1e-5
GELU_COEF = math.sqrt(2.0 / math.pi)


class Tensor:
    """Dense array plus an optional gradient buffer."""

    __slots__ = ('data', 'requires_grad', 'grad', 'name', 'is_leaf')

    def __init__(self, data, requires_grad: bool = False, name: str = '', dtype=DEFAULT_DTYPE):
        self.data = np.array(data, dtype=dtype)
        self.requires_grad = bool(requires_grad)
        self.grad: Optional[np.ndarray] = None
        self.name = name
        self.is_leaf = True

    @classmethod
    def _wrap(cls, data: np.ndarray, requires_grad: bool = False) -> 'Tensor':
        t = cls.__new__(cls)
        t.data = data
        t.requires_grad = requires_grad
        t.grad = None
        t.name = ''
        t.is_leaf = not requires_grad
        return t

    @property
    def shape(self) -> Tuple[int, ...]:
        return self.data.shape

    @property
    def size(self) -> int:
        return int(self.data.size)

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0])

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        label = f" name={self.name!r}" if self.name else ''
        return f"Tensor(shape={self.shape}, dtype={self.dtype}, requires_grad={self.requires_grad}{label})"

    def __matmul__(self, other: 'Tensor') -> 'Tensor':
        return matmul(self, other)

    def __add__(self, other: 'Tensor') -> 'Tensor':
        return add(self, other)

    def __sub__(self, other: 'Tensor') -> 'Tensor':
        return sub(self, other)

    def __mul__(self, other: 'Tensor') -> 'Tensor':
        return mul(self, other)

    def __neg__(self) -> 'Tensor':
        return scale(self, -1.0)


@dataclass
class TapeRecord:
    op: str
    inputs: Tuple[Tensor, ...]
    output: Tensor
    backward: Callable[[np.ndarray], Sequence[Optional[np.ndarray]]]


class Tape:
    """Ordered record of executed operations; replayed in reverse by backward()."""

    def __init__(self):
        self.records: List[TapeRecord] = []

    def __enter__(self) -> 'Tape':
        _tape_stack().append(self)
        return self

    def __exit__(self, *exc) -> None:
        stack = _tape_stack()
        if stack and stack[-1] is self:
            stack.pop()

    def __len__(self) -> int:
        return len(self.records)

    def record(self, op: str, inputs: Sequence[Tensor], output: Tensor, backward) -> None:
        self.records.append(TapeRecord(op, tuple(inputs), output, backward))

    def backward(self, loss: Tensor, grad: Optional[np.ndarray] = None) -> None:
        """
        Run the reverse pass from `loss`. Leaf gradients accumulate into
        `.grad`; calling twice without zeroing doubles them.
        """
        if grad is None:
            if loss.size != 1:
                raise ShapeError("backward() needs an explicit gradient for non-scalar output", loss.shape)
            grad = np.ones_like(loss.data)
        if loss.is_leaf:
            _accumulate(loss, grad)
            return

        pending: Dict[int, np.ndarray] = {id(loss): np.asarray(grad, dtype=loss.dtype)}
        for rec in reversed(self.records):
            g = pending.pop(id(rec.output), None)
            if g is None:
                continue
            for inp, ig in zip(rec.inputs, rec.backward(g)):
                if ig is None or not inp.requires_grad:
                    continue
                if inp.is_leaf:
                    _accumulate(inp, ig)
                else:
                    key = id(inp)
                    pending[key] = pending[key] + ig if key in pending else ig


_local = threading.local()


def _tape_stack() -> list:
    stack = getattr(_local, 'stack', None)
    if stack is None:
        stack = _local.stack = []
    return stack


def current_tape() -> Optional[Tape]:
    stack = _tape_stack()
    return stack[-1] if stack else None


@contextmanager
def no_grad() -> Iterator[None]:
    """Suspend recording on this thread."""
    stack = _tape_stack()
    stack.append(None)
    try:
        yield
    finally:
        stack.pop()


def _accumulate(t: Tensor, g: np.ndarray) -> None:
    g = np.asarray(g, dtype=t.dtype).reshape(t.shape)
    t.grad = g.copy() if t.grad is None else t.grad + g


def _emit(op: str, inputs: Sequence[Tensor], data: np.ndarray, backward) -> Tensor:
    tape = current_tape()
    track = tape is not None and any(t.requires_grad for t in inputs)
    out = Tensor._wrap(data, requires_grad=track)
    if track:
        tape.record(op, inputs, out, backward)
    return out


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def unbroadcast(grad: np.ndarray, shape: Tuple[int, ...]) -> np.ndarray:
    """Sum `grad` down to `shape` after numpy broadcasting."""
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, extent in enumerate(shape):
        if extent == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


def _check_suffix_broadcast(a: Tensor, b: Tensor, op: str) -> None:
    sa, sb = a.shape, b.shape
    k = min(len(sa), len(sb))
    for s, t in zip(sa[len(sa) - k:], sb[len(sb) - k:]):
        if s != t and s != 1 and t != 1:
            raise ShapeError(f"{op}: incompatible shapes", sa, sb)


# Arithmetic

def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Batched matrix product; 1-D operands are promoted like numpy."""
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim == 0 or b.ndim == 0:
        raise ShapeError("matmul needs at least 1-D operands", a.shape, b.shape)
    inner_b = b.shape[-2] if b.ndim > 1 else b.shape[0]
    if a.shape[-1] != inner_b:
        raise ShapeError("matmul inner extents differ", a.shape, b.shape)
    try:
        np.broadcast_shapes(a.shape[:-2], b.shape[:-2])
    except ValueError:
        raise ShapeError("matmul batch extents not broadcastable", a.shape, b.shape) from None

    a2 = a.data if a.ndim > 1 else a.data[None, :]
    b2 = b.data if b.ndim > 1 else b.data[:, None]
    out2 = np.matmul(a2, b2)
    out = out2
    if a.ndim == 1:
        out = out[..., 0, :]
    if b.ndim == 1:
        out = out[..., 0]

    def backward(g):
        g2 = g.reshape(out2.shape)
        ga = unbroadcast(np.matmul(g2, np.swapaxes(b2, -1, -2)), a2.shape).reshape(a.shape)
        gb = unbroadcast(np.matmul(np.swapaxes(a2, -1, -2), g2), b2.shape).reshape(b.shape)
        return ga, gb

    return _emit('matmul', (a, b), out, backward)


def add(a: Tensor, b: Tensor) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_suffix_broadcast(a, b, 'add')

    def backward(g):
        return unbroadcast(g, a.shape), unbroadcast(g, b.shape)

    return _emit('add', (a, b), a.data + b.data, backward)


def sub(a: Tensor, b: Tensor) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_suffix_broadcast(a, b, 'sub')

    def backward(g):
        return unbroadcast(g, a.shape), -unbroadcast(g, b.shape)

    return _emit('sub', (a, b), a.data - b.data, backward)


def mul(a: Tensor, b: Tensor) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_suffix_broadcast(a, b, 'mul')

    def backward(g):
        return unbroadcast(g * b.data, a.shape), unbroadcast(g * a.data, b.shape)

    return _emit('mul', (a, b), a.data * b.data, backward)


def scale(x: Tensor, factor: float) -> Tensor:
    x = as_tensor(x)
    return _emit('scale', (x,), x.data * factor, lambda g: (g * factor,))


def sum_all(x: Tensor) -> Tensor:
    x = as_tensor(x)
    out = np.asarray(x.data.sum(), dtype=x.dtype)
    return _emit('sum', (x,), out, lambda g: (np.broadcast_to(g, x.shape).copy(),))


def mean_all(x: Tensor) -> Tensor:
    x = as_tensor(x)
    n = max(x.size, 1)
    out = np.asarray(x.data.sum() / n, dtype=x.dtype)
    return _emit('mean', (x,), out, lambda g: (np.broadcast_to(g / n, x.shape).copy(),))


def mean_rows(x: Tensor) -> Tensor:
    """Mean over axis -2: [.., n, d] -> [.., d]."""
    x = as_tensor(x)
    n = x.shape[-2]
    if n == 0:
        raise ShapeError("mean over zero rows", x.shape)

    def backward(g):
        return (np.broadcast_to(np.expand_dims(g, -2) / n, x.shape).copy(),)

    return _emit('mean_rows', (x,), x.data.mean(axis=-2), backward)


# Shape plumbing

def reshape(x: Tensor, shape: Sequence[int]) -> Tensor:
    x = as_tensor(x)
    try:
        out = x.data.reshape(tuple(shape))
    except ValueError:
        raise ShapeError("cannot reshape", x.shape, tuple(shape)) from None
    return _emit('reshape', (x,), out, lambda g: (g.reshape(x.shape),))


def transpose(x: Tensor, axes: Sequence[int]) -> Tensor:
    x = as_tensor(x)
    axes = tuple(axes)
    inverse = tuple(np.argsort(axes))
    return _emit('transpose', (x,), np.transpose(x.data, axes), lambda g: (np.transpose(g, inverse),))


def take(x: Tensor, index) -> Tensor:
    """
    Index with integers, slices or integer arrays (numpy rules). Repeated
    array indices scatter-add in the backward pass.
    """
    x = as_tensor(x)
    out = np.array(x.data[index])

    def backward(g):
        full = np.zeros_like(x.data, dtype=np.result_type(x.data, g))
        np.add.at(full, index, g)
        return (full,)

    return _emit('take', (x,), out, backward)


def repeat_batch(x: Tensor, count: int) -> Tensor:
    """Prepend a batch axis of `count` copies; gradients sum back."""
    x = as_tensor(x)
    out = np.broadcast_to(x.data, (count,) + x.shape).copy()
    return _emit('repeat_batch', (x,), out, lambda g: (g.sum(axis=0),))


def concat(tensors: Sequence[Tensor], axis: int = -2) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    ref = tensors[0]
    ax = axis % ref.ndim
    for t in tensors[1:]:
        if t.ndim != ref.ndim or any(t.shape[i] != ref.shape[i] for i in range(ref.ndim) if i != ax):
            raise ShapeError("concat extents differ off the joined axis", ref.shape, t.shape)
    out = np.concatenate([t.data for t in tensors], axis=ax)
    bounds = np.cumsum([t.shape[ax] for t in tensors])[:-1]

    def backward(g):
        return tuple(np.split(g, bounds, axis=ax))

    return _emit('concat', tensors, out, backward)


def concat_rows(a: Tensor, b: Tensor) -> Tensor:
    """Rows of `a` followed by rows of `b` (axis -2)."""
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-1]:
        raise ShapeError("concat_rows trailing extents differ", a.shape, b.shape)
    return concat((a, b), axis=-2)


def stack(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    shapes = {t.shape for t in tensors}
    if len(shapes) != 1:
        raise ShapeError("stack needs equal shapes", *sorted(shapes))
    out = np.stack([t.data for t in tensors], axis=axis)

    def backward(g):
        return tuple(np.moveaxis(g, axis, 0))

    return _emit('stack', tensors, out, backward)


def embedding_gather(table: Tensor, ids) -> Tensor:
    """Rows of `table` for `ids` (a list, or a list of equal-length lists)."""
    table = as_tensor(table)
    idx = np.asarray(ids, dtype=np.int64)
    vocab = table.shape[0]
    bad = idx[(idx < 0) | (idx >= vocab)]
    if bad.size:
        raise VocabularyError(int(bad[0]), vocab)
    out = table.data[idx]

    def backward(g):
        full = np.zeros_like(table.data, dtype=np.result_type(table.data, g))
        np.add.at(full, idx, g)
        return (full,)

    return _emit('embedding', (table,), out, backward)


# Nonlinearities

def softmax_lastdim(x: Tensor, mask: Optional[np.ndarray] = None) -> Tensor:
    """
    Softmax over the last axis with max-subtraction. `mask` marks blocked
    positions (True = excluded); fully blocked rows come out as zeros.
    """
    x = as_tensor(x)
    if x.ndim == 0 or x.shape[-1] < 1:
        raise ShapeError("softmax needs a non-empty last axis", x.shape)
    z = x.data if mask is None else np.where(mask, np.array(-np.inf, dtype=x.dtype), x.data)
    peak = z.max(axis=-1, keepdims=True)
    peak = np.where(np.isfinite(peak), peak, 0)
    e = np.exp(z - peak)
    total = e.sum(axis=-1, keepdims=True)
    y = e / np.where(total > 0, total, 1)

    def backward(g):
        return (y * (g - (g * y).sum(axis=-1, keepdims=True)),)

    return _emit('softmax', (x,), y, backward)


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = LAYER_NORM_EPS) -> Tensor:
    x, gain, bias = as_tensor(x), as_tensor(gain), as_tensor(bias)
    d = x.shape[-1]
    if gain.shape != (d,) or bias.shape != (d,):
        raise ShapeError("layer_norm affine width differs from input", x.shape, gain.shape)
    mu = x.data.mean(axis=-1, keepdims=True)
    centered = x.data - mu
    inv = 1.0 / np.sqrt((centered * centered).mean(axis=-1, keepdims=True) + eps)
    xhat = centered * inv
    out = xhat * gain.data + bias.data

    def backward(g):
        gx_hat = g * gain.data
        gx = inv / d * (d * gx_hat - gx_hat.sum(axis=-1, keepdims=True)
                        - xhat * (gx_hat * xhat).sum(axis=-1, keepdims=True))
        lead = tuple(range(g.ndim - 1))
        return gx, (g * xhat).sum(axis=lead), g.sum(axis=lead)

    return _emit('layer_norm', (x, gain, bias), out, backward)


def gelu(x: Tensor) -> Tensor:
    """tanh approximation."""
    x = as_tensor(x)
    u = GELU_COEF * (x.data + 0.044715 * x.data ** 3)
    t = np.tanh(u)
    out = 0.5 * x.data * (1.0 + t)

    def backward(g):
        du = GELU_COEF * (1.0 + 3 * 0.044715 * x.data ** 2)
        return (g * (0.5 * (1.0 + t) + 0.5 * x.data * (1.0 - t * t) * du),)

    return _emit('gelu', (x,), out, backward)


# Losses

def cross_entropy_with_logits(logits: Tensor, targets: Sequence[int]) -> Tensor:
    """Mean K-way cross-entropy in log-sum-exp form."""
    logits = as_tensor(logits)
    if logits.ndim != 2:
        raise ShapeError("cross_entropy expects [b, K] logits", logits.shape)
    b, k = logits.shape
    tgt = np.asarray(list(targets), dtype=np.int64)
    if tgt.shape != (b,):
        raise ShapeError("targets length differs from logits rows", logits.shape, tgt.shape)
    if b == 0:
        raise ShapeError("cross_entropy over an empty batch", logits.shape)
    if np.any(tgt < 0) or np.any(tgt >= k):
        raise ValueError(f"targets must lie in [0, {k})")
    z = logits.data
    peak = z.max(axis=-1, keepdims=True)
    shifted = z - peak
    lse = np.log(np.exp(shifted).sum(axis=-1, keepdims=True))
    log_probs = shifted - lse
    rows = np.arange(b)
    out = np.asarray(-log_probs[rows, tgt].sum() / b, dtype=logits.dtype)

    def backward(g):
        grad = np.exp(log_probs)
        grad[rows, tgt] -= 1.0
        return (grad * (g / b),)

    return _emit('cross_entropy', (logits,), out, backward)


def bce_with_logits(logits: Tensor, targets: Sequence[int]) -> Tensor:
    """
    Binary cross-entropy on 2-way logits: softmax over (not-entail, entail),
    o = P(entail), loss = mean of -[c log o + (1-c) log(1-o)].
    """
    logits = as_tensor(logits)
    if logits.ndim != 2 or logits.shape[1] != 2:
        raise ShapeError("bce_with_logits expects [b, 2] logits", logits.shape)
    targets = list(targets)
    if len(targets) != logits.shape[0]:
        raise ShapeError("targets length differs from logits rows", logits.shape, (len(targets),))
    if any(c not in (0, 1) for c in targets):
        raise ValueError("binary targets must be 0 or 1")
    return cross_entropy_with_logits(logits, targets)


# Optimizers

@dataclass
class AdamState:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8
    t: int = 0
    m: Dict[str, np.ndarray] = field(default_factory=dict)
    v: Dict[str, np.ndarray] = field(default_factory=dict)


def _require_grads(params: Mapping[str, Tensor]) -> None:
    for name, p in params.items():
        if p.grad is None and p.size:
            raise MissingGradientError(name)


def adam_step(params: Mapping[str, Tensor], state: AdamState) -> AdamState:
    """One bias-corrected Adam update, in place. Gradients are cleared afterwards."""
    _require_grads(params)
    state.t += 1
    c1 = 1.0 - state.beta1 ** state.t
    c2 = 1.0 - state.beta2 ** state.t
    for name, p in params.items():
        g = p.grad if p.grad is not None else np.zeros_like(p.data)
        m = state.m.get(name)
        v = state.v.get(name)
        if m is None:
            m = np.zeros_like(p.data)
            v = np.zeros_like(p.data)
        m = state.beta1 * m + (1.0 - state.beta1) * g
        v = state.beta2 * v + (1.0 - state.beta2) * g * g
        state.m[name], state.v[name] = m, v
        update = state.lr * (m / c1) / (np.sqrt(v / c2) + state.epsilon)
        p.data = (p.data - update).astype(p.dtype, copy=False)
        p.zero_grad()
    return state


def sgd_step(params: Mapping[str, Tensor], lr: float) -> None:
    _require_grads(params)
    for p in params.values():
        if p.grad is not None:
            p.data = (p.data - lr * p.grad).astype(p.dtype, copy=False)
        p.zero_grad()


# Finite-difference oracle

@dataclass
class GradCheckReport:
    errors: Dict[str, float]
    tolerance: float
    non_finite: bool = False
    message: str = ''

    @property
    def max_error(self) -> float:
        return max(self.errors.values(), default=0.0)

    @property
    def passed(self) -> bool:
        return not self.non_finite and self.max_error <= self.tolerance

    def to_dict(self) -> dict:
        return {
            'errors': {k: float(v) for k, v in self.errors.items()},
            'max_error': float(self.max_error),
            'tolerance': self.tolerance,
            'non_finite': self.non_finite,
            'passed': self.passed,
            'message': self.message,
        }


def relative_error(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    return np.abs(a - b) / np.maximum(np.maximum(np.abs(a), np.abs(b)), 1e-8)


def finite_diff_check(f: Callable[[], Tensor], params: Mapping[str, Tensor], step: float = 1e-4,
                      mode: str = 'f64', tolerance: float = 1e-4) -> GradCheckReport:
    """
    Compare reverse-mode gradients of the scalar `f()` against central
    differences for every coordinate of every tensor in `params`.

    mode='f64' runs both passes with the parameters cast to float64; 'f32'
    uses them as stored. Parameter data and gradients are restored afterwards.
    """
    if step <= 0:
        raise ValueError("finite-difference step must be positive")
    if mode not in ('f64', 'f32'):
        raise ValueError(f"unknown precision mode '{mode}'")

    saved = {name: (p.data, p.grad) for name, p in params.items()}
    try:
        for p in params.values():
            p.data = p.data.astype(np.float64 if mode == 'f64' else p.dtype, copy=True)
            p.grad = None

        with Tape() as tape:
            loss = f()
        if not np.all(np.isfinite(loss.data)):
            return GradCheckReport({}, tolerance, non_finite=True, message=f"f() is not finite: {loss.data}")
        tape.backward(loss)
        analytic = {name: (p.grad if p.grad is not None else np.zeros_like(p.data)) for name, p in params.items()}

        errors: Dict[str, float] = {}
        for name, p in params.items():
            numeric = np.zeros(p.shape, dtype=np.float64)
            flat = p.data.reshape(-1)
            for i in range(flat.size):
                orig = flat[i]
                with no_grad():
                    flat[i] = orig + step
                    f_plus = f().item()
                    flat[i] = orig - step
                    f_minus = f().item()
                flat[i] = orig
                if not (math.isfinite(f_plus) and math.isfinite(f_minus)):
                    return GradCheckReport(errors, tolerance, non_finite=True,
                                           message=f"f() not finite while perturbing {name}[{i}]")
                numeric.reshape(-1)[i] = (f_plus - f_minus) / (2 * step)
            errors[name] = float(relative_error(analytic[name], numeric).max(initial=0.0))
            logger.debug(f"[CHECK] {name}: max relative error {errors[name]:.3e}")
        return GradCheckReport(errors, tolerance)
    finally:
        for name, p in params.items():
            p.data, p.grad = saved[name]
