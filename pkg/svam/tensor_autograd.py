#!/usr/bin/env python3
"""
Tensor Autograd
Dense numpy-backed tensors with a reverse-mode tape, the ops every model in the
pipeline is built from, Adam, and a finite-difference gradient checker.
"""

import contextlib
import logging
import math
from dataclasses import dataclass, field
from typing import Callable, Dict, Iterable, List, Optional, Sequence, Tuple, Union

import numpy as np

from svam.errors import GradientError, NumericalError, ShapeError, SvamError

logger = logging.getLogger(__name__)

# Training runs in 32-bit; grad_check flips this to 64-bit for its duration.
_DTYPE = np.float32
_GRAD_ENABLED = True

ArrayLike = Union[np.ndarray, float, int, Sequence]


def default_dtype():
    return _DTYPE


@contextlib.contextmanager
def float64_mode():
    """Create all new tensors in 64-bit while the block runs."""
    global _DTYPE
    previous = _DTYPE
    _DTYPE = np.float64
    try:
        yield
    finally:
        _DTYPE = previous


@contextlib.contextmanager
def no_grad():
    """Run ops without recording them on the tape."""
    global _GRAD_ENABLED
    previous = _GRAD_ENABLED
    _GRAD_ENABLED = False
    try:
        yield
    finally:
        _GRAD_ENABLED = previous


# ---------------------------------------------------------------------------
# Hashing and random streams
# ---------------------------------------------------------------------------

FNV_OFFSET = 0xCBF29CE484222325
FNV_PRIME = 0x100000001B3


def fnv1a64(payload: bytes) -> int:
    """64-bit FNV-1a over raw bytes."""
    value = FNV_OFFSET
    for byte in payload:
        value ^= byte
        value = (value * FNV_PRIME) & 0xFFFFFFFFFFFFFFFF
    return value


def rng_stream(seed: int, *names) -> np.random.Generator:
    """
    Named stream of the run's counter-based generator.

    Every stochastic site asks for its own stream by name (plus any indices
    that identify the draw), so adding a new site never shifts another's draws.

    Args:
        seed: Run seed (unsigned 64-bit)
        *names: Stream path, e.g. ("stage1", "batch", step)

    Returns:
        numpy Generator over a Philox bit generator
    """
    key = [int(seed) & 0xFFFFFFFFFFFFFFFF]
    key.extend(fnv1a64(str(name).encode("utf-8")) for name in names)
    return np.random.Generator(np.random.Philox(np.random.SeedSequence(key)))


# ---------------------------------------------------------------------------
# Tensor and tape
# ---------------------------------------------------------------------------

class Tensor:
    """
    Row-major dense array that can take part in reverse-mode differentiation.

    `grad` is a plain ndarray of the same shape, present only on leaves that
    require gradients after `backward` has run.
    """

    def __init__(self, data: ArrayLike, requires_grad: bool = False, name: Optional[str] = None):
        self.data = np.asarray(data, dtype=_DTYPE)
        self.requires_grad = requires_grad
        self.grad: Optional[np.ndarray] = None
        self.name = name
        self._parents: Tuple["Tensor", ...] = ()
        self._backward: Optional[Callable[[np.ndarray], Sequence[Optional[np.ndarray]]]] = None
        self._op = "leaf"

    @property
    def shape(self) -> Tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0])

    def zero_grad(self):
        self.grad = None

    def backward(self):
        backward(self)

    def __repr__(self):
        return f"Tensor(shape={self.shape}, op={self._op}, requires_grad={self.requires_grad})"

    def __add__(self, other):
        return add(self, _as_tensor(other))

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, _as_tensor(other))

    def __rsub__(self, other):
        return sub(_as_tensor(other), self)

    def __mul__(self, other):
        if isinstance(other, (int, float)):
            return scale(self, float(other))
        return mul(self, _as_tensor(other))

    __rmul__ = __mul__

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, _as_tensor(other))


def _as_tensor(value) -> Tensor:
    return value if isinstance(value, Tensor) else Tensor(value)


def _result(data: np.ndarray, parents: Tuple[Tensor, ...], backward_fn, op: str) -> Tensor:
    if not np.all(np.isfinite(data)):
        raise NumericalError(op)
    track = _GRAD_ENABLED and any(p.requires_grad for p in parents)
    out = Tensor(data, requires_grad=track)
    out._op = op
    if track:
        out._parents = parents
        out._backward = backward_fn
    return out


def _unbroadcast(grad: np.ndarray, shape: Tuple[int, ...]) -> np.ndarray:
    if grad.shape == shape:
        return grad
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, extent in enumerate(shape):
        if extent == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


def backward(loss: Tensor):
    """
    Accumulate d(loss)/d(leaf) into `.grad` of every reachable leaf that requires it.

    Gradients add onto whatever `.grad` already holds; callers zero between steps.
    """
    if loss.data.size != 1:
        raise ShapeError("backward", "scalar loss", loss.shape)

    order: List[Tensor] = []
    visited = set()
    stack = [(loss, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in visited:
            continue
        visited.add(id(node))
        stack.append((node, True))
        for parent in node._parents:
            if parent.requires_grad and id(parent) not in visited:
                stack.append((parent, False))

    pending: Dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    for node in reversed(order):
        grad = pending.pop(id(node), None)
        if grad is None:
            continue
        if node._backward is None:
            if node.requires_grad:
                node.grad = grad.copy() if node.grad is None else node.grad + grad
            continue
        for parent, parent_grad in zip(node._parents, node._backward(grad)):
            if parent_grad is None or not parent.requires_grad:
                continue
            key = id(parent)
            pending[key] = parent_grad if key not in pending else pending[key] + parent_grad


# ---------------------------------------------------------------------------
# Elementwise and linear-algebra ops
# ---------------------------------------------------------------------------

def add(a: Tensor, b: Tensor) -> Tensor:
    try:
        data = a.data + b.data
    except ValueError:
        raise ShapeError("add", a.shape, b.shape)
    return _result(data, (a, b),
                   lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)), "add")


def sub(a: Tensor, b: Tensor) -> Tensor:
    try:
        data = a.data - b.data
    except ValueError:
        raise ShapeError("sub", a.shape, b.shape)
    return _result(data, (a, b),
                   lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)), "sub")


def mul(a: Tensor, b: Tensor) -> Tensor:
    try:
        data = a.data * b.data
    except ValueError:
        raise ShapeError("mul", a.shape, b.shape)
    return _result(data, (a, b),
                   lambda g: (_unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)),
                   "mul")


def scale(a: Tensor, factor: float) -> Tensor:
    return _result(a.data * factor, (a,), lambda g: (g * factor,), "scale")


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Batched matrix product over the last two axes; leading axes broadcast."""
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ShapeError("matmul", f"(..., n, k) @ (..., k, m)", (a.shape, b.shape))
    try:
        data = np.matmul(a.data, b.data)
    except ValueError:
        raise ShapeError("matmul", "broadcastable leading axes", (a.shape, b.shape))

    def grad_fn(g):
        grad_a = np.matmul(g, np.swapaxes(b.data, -1, -2)) if a.requires_grad else None
        grad_b = np.matmul(np.swapaxes(a.data, -1, -2), g) if b.requires_grad else None
        return (None if grad_a is None else _unbroadcast(grad_a, a.shape),
                None if grad_b is None else _unbroadcast(grad_b, b.shape))

    return _result(data, (a, b), grad_fn, "matmul")


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0
    return _result(x.data * mask, (x,), lambda g: (g * mask,), "relu")


_GELU_C = math.sqrt(2.0 / math.pi)


def gelu(x: Tensor) -> Tensor:
    """tanh approximation of GELU."""
    v = x.data
    inner = _GELU_C * (v + 0.044715 * v ** 3)
    t = np.tanh(inner)
    out = 0.5 * v * (1.0 + t)

    def grad_fn(g):
        d_inner = _GELU_C * (1.0 + 3.0 * 0.044715 * v ** 2)
        return (g * (0.5 * (1.0 + t) + 0.5 * v * (1.0 - t ** 2) * d_inner),)

    return _result(out, (x,), grad_fn, "gelu")


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    shifted = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    s = e / e.sum(axis=axis, keepdims=True)

    def grad_fn(g):
        return (s * (g - (g * s).sum(axis=axis, keepdims=True)),)

    return _result(s, (x,), grad_fn, "softmax")


def layer_norm(x: Tensor, axis: int = -1, eps: float = 1e-5) -> Tensor:
    """Normalize to zero mean and unit variance along `axis` (no affine part)."""
    mu = x.data.mean(axis=axis, keepdims=True)
    centered = x.data - mu
    var = (centered ** 2).mean(axis=axis, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    y = centered * inv

    def grad_fn(g):
        g_mean = g.mean(axis=axis, keepdims=True)
        gy_mean = (g * y).mean(axis=axis, keepdims=True)
        return (inv * (g - g_mean - y * gy_mean),)

    return _result(y, (x,), grad_fn, "layer_norm")


def sum_all(x: Tensor) -> Tensor:
    return _result(np.asarray(x.data.sum()), (x,),
                   lambda g: (np.broadcast_to(g, x.shape).copy(),), "sum")


def mean(x: Tensor, axis: Optional[int] = None, keepdims: bool = False) -> Tensor:
    if axis is None:
        count = x.data.size
        return _result(np.asarray(x.data.mean()), (x,),
                       lambda g: (np.full(x.shape, float(g) / count, dtype=x.data.dtype),), "mean")
    count = x.shape[axis]
    data = x.data.mean(axis=axis, keepdims=keepdims)

    def grad_fn(g):
        if not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g / count, x.shape).copy(),)

    return _result(data, (x,), grad_fn, "mean")


def mse(pred: Tensor, target: Tensor) -> Tensor:
    """Mean of squared differences over all elements."""
    if pred.shape != target.shape:
        raise ShapeError("mse", pred.shape, target.shape)
    diff = pred.data - target.data
    count = diff.size

    def grad_fn(g):
        base = (2.0 * float(g) / count) * diff
        return (base, -base)

    return _result(np.asarray((diff ** 2).mean()), (pred, target), grad_fn, "mse")


# ---------------------------------------------------------------------------
# Shape ops
# ---------------------------------------------------------------------------

def reshape(x: Tensor, shape: Sequence[int]) -> Tensor:
    shape = tuple(shape)
    try:
        data = x.data.reshape(shape)
    except ValueError:
        raise ShapeError("reshape", shape, x.shape)
    return _result(data, (x,), lambda g: (g.reshape(x.shape),), "reshape")


def permute(x: Tensor, axes: Sequence[int]) -> Tensor:
    axes = tuple(axes)
    if sorted(axes) != list(range(x.ndim)):
        raise ShapeError("permute", f"a permutation of {x.ndim} axes", axes)
    inverse = tuple(np.argsort(axes))
    return _result(np.transpose(x.data, axes), (x,), lambda g: (np.transpose(g, inverse),), "permute")


def swap_last(x: Tensor) -> Tensor:
    axes = list(range(x.ndim))
    axes[-1], axes[-2] = axes[-2], axes[-1]
    return permute(x, axes)


def concat(tensors: Sequence[Tensor], axis: int) -> Tensor:
    """Join along `axis`; every other extent must agree."""
    tensors = list(tensors)
    if not tensors:
        raise ShapeError("concat", "at least one input", 0)
    ndim = tensors[0].ndim
    axis = axis % ndim
    reference = tensors[0].shape
    for t in tensors[1:]:
        if t.ndim != ndim or any(t.shape[i] != reference[i] for i in range(ndim) if i != axis):
            raise ShapeError("concat", f"{reference} except axis {axis}", t.shape)
    data = np.concatenate([t.data for t in tensors], axis=axis)
    bounds = np.cumsum([t.shape[axis] for t in tensors])[:-1]

    def grad_fn(g):
        return tuple(np.split(g, bounds, axis=axis))

    return _result(data, tuple(tensors), grad_fn, "concat")


def repeat(x: Tensor, count: int, axis: int) -> Tensor:
    """Repeat each slice along `axis` `count` times (numpy.repeat semantics)."""
    axis = axis % x.ndim
    data = np.repeat(x.data, count, axis=axis)

    def grad_fn(g):
        shape = x.shape[:axis] + (x.shape[axis], count) + x.shape[axis + 1:]
        return (g.reshape(shape).sum(axis=axis + 1),)

    return _result(data, (x,), grad_fn, "repeat")


def broadcast_to(x: Tensor, shape: Sequence[int]) -> Tensor:
    shape = tuple(shape)
    try:
        data = np.broadcast_to(x.data, shape).copy()
    except ValueError:
        raise ShapeError("broadcast_to", shape, x.shape)
    return _result(data, (x,), lambda g: (_unbroadcast(g, x.shape),), "broadcast_to")


def take_rows(table: Tensor, indices: np.ndarray) -> Tensor:
    """Embedding lookup: rows of a (V, D) table gathered by integer indices."""
    indices = np.asarray(indices, dtype=np.int64)
    if table.ndim != 2:
        raise ShapeError("take_rows", "(V, D) table", table.shape)
    if indices.size and (indices.min() < 0 or indices.max() >= table.shape[0]):
        raise ShapeError("take_rows", f"indices in [0, {table.shape[0]})", (int(indices.min()), int(indices.max())))

    def grad_fn(g):
        grad = np.zeros_like(table.data)
        np.add.at(grad, indices.reshape(-1), g.reshape(-1, table.shape[1]))
        return (grad,)

    return _result(table.data[indices], (table,), grad_fn, "take_rows")


def zeros_like(x: Tensor) -> Tensor:
    return Tensor(np.zeros(x.shape))


# ---------------------------------------------------------------------------
# Attention and resampling
# ---------------------------------------------------------------------------

def attention_with_weights(q: Tensor, k: Tensor, v: Tensor) -> Tuple[Tensor, Tensor]:
    """
    Scaled dot-product attention over the last two axes.

    Args:
        q: (..., n_q, d)
        k: (..., n_k, d)
        v: (..., n_k, d_v)

    Returns:
        (output (..., n_q, d_v), weights (..., n_q, n_k)); each weight row sums to 1
    """
    if k.shape[-2] == 0:
        raise ShapeError("attention", "at least one key", k.shape)
    d = q.shape[-1]
    if d == 0 or k.shape[-1] != d or v.shape[-2] != k.shape[-2]:
        raise ShapeError("attention", f"q/k width {d}, k/v length {k.shape[-2]}", (q.shape, k.shape, v.shape))
    scores = scale(matmul(q, swap_last(k)), 1.0 / math.sqrt(d))
    weights = softmax(scores, axis=-1)
    return matmul(weights, v), weights


def attention(q: Tensor, k: Tensor, v: Tensor) -> Tensor:
    return attention_with_weights(q, k, v)[0]


def bilinear_matrix(source: int, target: int) -> np.ndarray:
    """
    (target, source) resampling matrix under the align-corners convention:
    output sample 0 sits on input sample 0 and output sample target-1 on input
    sample source-1.
    """
    if source < 1 or target < 1:
        raise ShapeError("interpolate_bilinear", "extents >= 1", (source, target))
    matrix = np.zeros((target, source), dtype=np.float64)
    if source == 1:
        matrix[:, 0] = 1.0
        return matrix
    for i in range(target):
        pos = i * (source - 1) / (target - 1) if target > 1 else 0.0
        lo = min(int(math.floor(pos)), source - 1)
        hi = min(lo + 1, source - 1)
        frac = pos - lo
        matrix[i, lo] += 1.0 - frac
        matrix[i, hi] += frac
    return matrix


def interpolate_bilinear(x: Tensor, target: Tuple[int, int]) -> Tensor:
    """
    Resize the last two (spatial) axes to `target`, align-corners bilinear.

    Equal sizes return the input itself, so the identity case is bitwise exact.
    """
    if x.ndim < 2 or 0 in x.shape:
        raise ShapeError("interpolate_bilinear", "non-empty (..., h, w)", x.shape)
    h2, w2 = target
    if h2 < 1 or w2 < 1:
        raise ShapeError("interpolate_bilinear", "target extents >= 1", target)
    h1, w1 = x.shape[-2], x.shape[-1]
    if (h1, w1) == (h2, w2):
        return x
    rows = Tensor(bilinear_matrix(h1, h2))
    cols = Tensor(bilinear_matrix(w1, w2).T)
    return matmul(matmul(rows, x), cols)


def resize_array(x: np.ndarray, target: Tuple[int, int]) -> np.ndarray:
    """Same resampling as `interpolate_bilinear` on a plain array (no tape)."""
    h1, w1 = x.shape[-2], x.shape[-1]
    if (h1, w1) == tuple(target):
        return x
    rows = bilinear_matrix(h1, target[0])
    cols = bilinear_matrix(w1, target[1]).T
    return np.matmul(np.matmul(rows, x), cols).astype(x.dtype)


# ---------------------------------------------------------------------------
# Optimizer
# ---------------------------------------------------------------------------

@dataclass
class AdamState:
    """Bias-corrected Adam moments, one entry per registered parameter."""

    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step_count: int = 0
    first_moment: Dict[str, np.ndarray] = field(default_factory=dict)
    second_moment: Dict[str, np.ndarray] = field(default_factory=dict)

    @classmethod
    def for_parameters(cls, params: Dict[str, Tensor], **hyper) -> "AdamState":
        state = cls(**hyper)
        for name, param in params.items():
            state.first_moment[name] = np.zeros_like(param.data)
            state.second_moment[name] = np.zeros_like(param.data)
        return state


def adam_step(params: Dict[str, Tensor], state: AdamState):
    """Apply one Adam update in place. Gradients are left for the caller to clear."""
    if set(params) != set(state.first_moment):
        raise SvamError("optimizer state does not match the registered parameter set")
    missing = [name for name, p in params.items() if p.grad is None]
    if missing:
        raise GradientError(missing)

    state.step_count += 1
    t = state.step_count
    correction1 = 1.0 - state.beta1 ** t
    correction2 = 1.0 - state.beta2 ** t
    for name, param in params.items():
        g = param.grad
        m = state.first_moment[name]
        v = state.second_moment[name]
        m *= state.beta1
        m += (1.0 - state.beta1) * g
        v *= state.beta2
        v += (1.0 - state.beta2) * g * g
        update = state.lr * (m / correction1) / (np.sqrt(v / correction2) + state.eps)
        param.data = (param.data - update).astype(param.data.dtype)


def zero_grads(params: Iterable[Tensor]):
    for param in params:
        param.grad = None


# ---------------------------------------------------------------------------
# Gradient checking
# ---------------------------------------------------------------------------

@dataclass
class GradCheckReport:
    """Per-parameter max relative error of tape gradients against central differences."""

    tol: float
    errors: Dict[str, float] = field(default_factory=dict)

    @property
    def passed(self) -> bool:
        return all(err < self.tol for err in self.errors.values())

    @property
    def worst(self) -> float:
        return max(self.errors.values()) if self.errors else 0.0

    def to_dict(self) -> dict:
        return {
            "tol": self.tol,
            "passed": self.passed,
            "worst": self.worst,
            "parameters": {name: err for name, err in sorted(self.errors.items())},
        }


def grad_check(loss_fn: Callable[[], Tensor], params: Dict[str, Tensor], tol: float = 1e-4,
               step: float = 1e-5, max_entries: int = 24, seed: int = 0,
               corrupt_factor: float = 1.0) -> GradCheckReport:
    """
    Compare tape gradients with central finite differences in 64-bit.

    Args:
        loss_fn: Builds the scalar loss from the current parameter values
        params: Named parameters to check
        tol: Pass threshold on the per-parameter relative error
        step: Finite-difference step
        max_entries: Entries sampled per parameter
        seed: Entry sampling seed
        corrupt_factor: Multiplies tape gradients before comparison (fault injection)

    Returns:
        GradCheckReport; relative error is max|tape - fd| / max(max|tape|, max|fd|, 1e-8)
    """
    report = GradCheckReport(tol=tol)
    originals = {name: p.data for name, p in params.items()}
    rng = np.random.default_rng(seed)
    with float64_mode():
        try:
            for p in params.values():
                p.data = p.data.astype(np.float64)
                p.grad = None
            backward(loss_fn())
            for name, p in params.items():
                tape = np.zeros_like(p.data) if p.grad is None else p.grad * corrupt_factor
                count = min(max_entries, p.data.size)
                chosen = rng.choice(p.data.size, size=count, replace=False)
                numeric = np.empty(count)
                flat = p.data.reshape(-1)
                with no_grad():
                    for j, idx in enumerate(chosen):
                        original = flat[idx]
                        flat[idx] = original + step
                        plus = float(loss_fn().data)
                        flat[idx] = original - step
                        minus = float(loss_fn().data)
                        flat[idx] = original
                        numeric[j] = (plus - minus) / (2.0 * step)
                analytic = tape.reshape(-1)[chosen]
                denom = max(np.abs(analytic).max(), np.abs(numeric).max(), 1e-8)
                report.errors[name] = float(np.abs(analytic - numeric).max() / denom)
        finally:
            for name, p in params.items():
                p.data = originals[name]
                p.grad = None
    logger.info(f"Gradient check: {len(report.errors)} parameters, worst relative error {report.worst:.3e}")
    return report
