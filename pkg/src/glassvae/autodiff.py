"""Reverse-mode automatic differentiation over dense float64 arrays.

Every op returns a new ``Tensor`` whose ``_parents`` / ``_backward`` fields
form the recording tape: parents always precede children (construction
order), and ``backward`` replays the closures once each in reverse
topological order. The operator set is exactly what the encoder/decoder
stack and the loss terms need; there is no GPU path, no broadcasting beyond
numpy's rules, and no higher-order derivatives.

Conventions:
    - all buffers are float64; integer inputs are cast on construction
    - relu uses subgradient 0 at the kink
    - softmax subtracts the row max before exponentiating
"""

from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

Array = np.ndarray


class Tensor:
    """A float64 array plus the tape bookkeeping needed for backward()."""

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward")

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.asarray(data, dtype=np.float64)
        self.requires_grad = requires_grad
        self.grad: Array | None = None
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable[[], None] | None = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    def item(self) -> float:
        return float(self.data.item())

    def zero_grad(self) -> None:
        self.grad = np.zeros_like(self.data)

    def __repr__(self) -> str:
        return f"Tensor(shape={self.data.shape}, requires_grad={self.requires_grad})"

    # operator sugar; all semantics live in the module-level functions
    def __add__(self, other):
        return add(self, as_tensor(other))

    def __radd__(self, other):
        return add(as_tensor(other), self)

    def __sub__(self, other):
        return sub(self, as_tensor(other))

    def __rsub__(self, other):
        return sub(as_tensor(other), self)

    def __mul__(self, other):
        return mul(self, as_tensor(other))

    def __rmul__(self, other):
        return mul(as_tensor(other), self)

    def __truediv__(self, other):
        return div(self, as_tensor(other))

    def __rtruediv__(self, other):
        return div(as_tensor(other), self)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, as_tensor(other))

    def __pow__(self, p):
        return power(self, p)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _accumulate(t: Tensor, delta: Array) -> None:
    if t.grad is None:
        # first touch: own a fresh buffer (delta may alias a downstream grad)
        t.grad = np.array(delta, dtype=np.float64)
    else:
        t.grad += delta


def _make(data: Array, parents: tuple[Tensor, ...], backward: Callable[[], None]) -> Tensor:
    out = Tensor(data)
    if any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = parents
        out._backward = backward
    return out


def _unbroadcast(grad: Array, shape: tuple[int, ...]) -> Array:
    """Reduce a broadcasted gradient back to the original operand shape."""
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad


def _check_broadcast(a: Tensor, b: Tensor, op: str) -> None:
    if a.data.shape == b.data.shape:
        return
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ValueError(f"{op}: shapes {a.shape} and {b.shape} do not broadcast") from None


# ---------------------------------------------------------------------------
# arithmetic
# ---------------------------------------------------------------------------

def add(a: Tensor, b: Tensor) -> Tensor:
    _check_broadcast(a, b, "add")

    def backward():
        if a.requires_grad:
            _accumulate(a, _unbroadcast(out.grad, a.shape))
        if b.requires_grad:
            _accumulate(b, _unbroadcast(out.grad, b.shape))

    out = _make(a.data + b.data, (a, b), backward)
    return out


def sub(a: Tensor, b: Tensor) -> Tensor:
    _check_broadcast(a, b, "sub")

    def backward():
        if a.requires_grad:
            _accumulate(a, _unbroadcast(out.grad, a.shape))
        if b.requires_grad:
            _accumulate(b, _unbroadcast(-out.grad, b.shape))

    out = _make(a.data - b.data, (a, b), backward)
    return out


def mul(a: Tensor, b: Tensor) -> Tensor:
    _check_broadcast(a, b, "mul")

    def backward():
        if a.requires_grad:
            _accumulate(a, _unbroadcast(out.grad * b.data, a.shape))
        if b.requires_grad:
            _accumulate(b, _unbroadcast(out.grad * a.data, b.shape))

    out = _make(a.data * b.data, (a, b), backward)
    return out


def div(a: Tensor, b: Tensor) -> Tensor:
    _check_broadcast(a, b, "div")

    def backward():
        if a.requires_grad:
            _accumulate(a, _unbroadcast(out.grad / b.data, a.shape))
        if b.requires_grad:
            _accumulate(b, _unbroadcast(-out.grad * a.data / (b.data * b.data), b.shape))

    out = _make(a.data / b.data, (a, b), backward)
    return out


def neg(a: Tensor) -> Tensor:
    def backward():
        if a.requires_grad:
            _accumulate(a, -out.grad)

    out = _make(-a.data, (a,), backward)
    return out


def power(a: Tensor, p: float) -> Tensor:
    p = float(p)

    def backward():
        if a.requires_grad:
            _accumulate(a, out.grad * p * a.data ** (p - 1.0))

    out = _make(a.data ** p, (a,), backward)
    return out


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.data.ndim != 2 or b.data.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ValueError(f"matmul: incompatible shapes {a.shape} and {b.shape}")

    def backward():
        if a.requires_grad:
            _accumulate(a, out.grad @ b.data.T)
        if b.requires_grad:
            _accumulate(b, a.data.T @ out.grad)

    out = _make(a.data @ b.data, (a, b), backward)
    return out


def linear(x: Tensor, w: Tensor, b: Tensor) -> Tensor:
    """Fused x @ w + b for (N, in) x (in, out) with an (out,) bias row."""
    if x.data.ndim != 2 or w.data.ndim != 2 or x.shape[1] != w.shape[0]:
        raise ValueError(f"linear: incompatible shapes {x.shape} and {w.shape}")
    if b.data.shape != (w.shape[1],):
        raise ValueError(f"linear: bias shape {b.shape} does not match output {w.shape[1]}")

    def backward():
        if x.requires_grad:
            _accumulate(x, out.grad @ w.data.T)
        if w.requires_grad:
            _accumulate(w, x.data.T @ out.grad)
        if b.requires_grad:
            _accumulate(b, out.grad.sum(axis=0))

    out = _make(x.data @ w.data + b.data, (x, w, b), backward)
    return out


# ---------------------------------------------------------------------------
# nonlinearities
# ---------------------------------------------------------------------------

def relu(a: Tensor) -> Tensor:
    mask = a.data > 0.0

    def backward():
        if a.requires_grad:
            _accumulate(a, out.grad * mask)

    out = _make(np.where(mask, a.data, 0.0), (a,), backward)
    return out


def _sigmoid(x: Array) -> Array:
    # overflow-safe: exp argument is always non-positive
    t = np.exp(-np.abs(x))
    return np.where(x >= 0.0, 1.0 / (1.0 + t), t / (1.0 + t))


def silu(a: Tensor) -> Tensor:
    sig = _sigmoid(a.data)

    def backward():
        if a.requires_grad:
            _accumulate(a, out.grad * sig * (1.0 + a.data * (1.0 - sig)))

    out = _make(a.data * sig, (a,), backward)
    return out


def exp(a: Tensor) -> Tensor:
    val = np.exp(a.data)

    def backward():
        if a.requires_grad:
            _accumulate(a, out.grad * val)

    out = _make(val, (a,), backward)
    return out


def log(a: Tensor) -> Tensor:
    def backward():
        if a.requires_grad:
            _accumulate(a, out.grad / a.data)

    out = _make(np.log(a.data), (a,), backward)
    return out


def sqrt(a: Tensor) -> Tensor:
    val = np.sqrt(a.data)

    def backward():
        if a.requires_grad:
            _accumulate(a, out.grad * 0.5 / val)

    out = _make(val, (a,), backward)
    return out


def clip(a: Tensor, lo: float, hi: float) -> Tensor:
    """Clamp values to [lo, hi]; gradient passes through inside the interval."""
    mask = (a.data >= lo) & (a.data <= hi)

    def backward():
        if a.requires_grad:
            _accumulate(a, out.grad * mask)

    out = _make(np.clip(a.data, lo, hi), (a,), backward)
    return out


def softmax(a: Tensor, axis: int = -1) -> Tensor:
    shifted = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    val = e / e.sum(axis=axis, keepdims=True)

    def backward():
        if a.requires_grad:
            g = out.grad
            _accumulate(a, val * (g - (g * val).sum(axis=axis, keepdims=True)))

    out = _make(val, (a,), backward)
    return out


# ---------------------------------------------------------------------------
# reductions and reshaping
# ---------------------------------------------------------------------------

def tsum(a: Tensor, axis: int | None = None, keepdims: bool = False) -> Tensor:
    def backward():
        if not a.requires_grad:
            return
        g = out.grad
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        _accumulate(a, np.broadcast_to(g, a.shape).copy())

    out = _make(a.data.sum(axis=axis, keepdims=keepdims), (a,), backward)
    return out


def tmean(a: Tensor, axis: int | None = None, keepdims: bool = False) -> Tensor:
    count = a.data.size if axis is None else a.shape[axis]

    def backward():
        if not a.requires_grad:
            return
        g = out.grad / count
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        _accumulate(a, np.broadcast_to(g, a.shape).copy())

    out = _make(a.data.mean(axis=axis, keepdims=keepdims), (a,), backward)
    return out


def reshape(a: Tensor, shape: tuple[int, ...]) -> Tensor:
    def backward():
        if a.requires_grad:
            _accumulate(a, out.grad.reshape(a.shape))

    out = _make(a.data.reshape(shape), (a,), backward)
    return out


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = tuple(tensors)
    sizes = [t.shape[axis] for t in tensors]
    offsets = np.cumsum(sizes)[:-1]

    def backward():
        pieces = np.split(out.grad, offsets, axis=axis)
        for t, piece in zip(tensors, pieces):
            if t.requires_grad:
                _accumulate(t, piece)

    out = _make(np.concatenate([t.data for t in tensors], axis=axis), tensors, backward)
    return out


def slice_cols(a: Tensor, start: int, stop: int) -> Tensor:
    def backward():
        if a.requires_grad:
            g = np.zeros_like(a.data)
            g[:, start:stop] = out.grad
            _accumulate(a, g)

    out = _make(a.data[:, start:stop].copy(), (a,), backward)
    return out


# ---------------------------------------------------------------------------
# gather / segment ops
# ---------------------------------------------------------------------------

def index_gather(a: Tensor, idx: Array) -> Tensor:
    """Select rows of ``a`` by integer index; duplicates allowed."""
    idx = np.asarray(idx, dtype=np.int64)

    def backward():
        if a.requires_grad:
            g = np.zeros_like(a.data)
            np.add.at(g, idx, out.grad)
            _accumulate(a, g)

    out = _make(a.data[idx], (a,), backward)
    return out


def segment_sum(a: Tensor, segment_ids: Array, n_segments: int) -> Tensor:
    ids = np.asarray(segment_ids, dtype=np.int64)
    if ids.size and (ids.min() < 0 or ids.max() >= n_segments):
        raise ValueError(f"segment ids outside [0, {n_segments})")
    val = np.zeros((n_segments,) + a.shape[1:], dtype=np.float64)
    np.add.at(val, ids, a.data)

    def backward():
        if a.requires_grad:
            _accumulate(a, out.grad[ids])

    out = _make(val, (a,), backward)
    return out


def segment_mean(a: Tensor, segment_ids: Array, n_segments: int) -> Tensor:
    """Per-segment mean of rows; empty segments yield zero rows."""
    ids = np.asarray(segment_ids, dtype=np.int64)
    if ids.size and (ids.min() < 0 or ids.max() >= n_segments):
        raise ValueError(f"segment ids outside [0, {n_segments})")
    counts = np.bincount(ids, minlength=n_segments).astype(np.float64)
    denom = np.maximum(counts, 1.0).reshape((n_segments,) + (1,) * (a.data.ndim - 1))
    sums = np.zeros((n_segments,) + a.shape[1:], dtype=np.float64)
    np.add.at(sums, ids, a.data)

    def backward():
        if a.requires_grad:
            _accumulate(a, (out.grad / denom)[ids])

    out = _make(sums / denom, (a,), backward)
    return out


# ---------------------------------------------------------------------------
# geometry helpers
# ---------------------------------------------------------------------------

def l2_norm(a: Tensor, axis: int = -1) -> Tensor:
    """Row-wise Euclidean norm; zero rows get zero gradient."""
    val = np.linalg.norm(a.data, axis=axis)

    def backward():
        if a.requires_grad:
            safe = np.where(val == 0.0, 1.0, val)
            g = np.expand_dims(out.grad / safe, axis)
            _accumulate(a, g * a.data)

    out = _make(val, (a,), backward)
    return out


def cosine_similarity(a: Tensor, b: Tensor, eps: float = 1e-12) -> Tensor:
    """Row-pair cosine; near-zero rows drop toward 0 via the eps guard."""
    dot = tsum(mul(a, b), axis=-1)
    denom = add(mul(l2_norm(a), l2_norm(b)), Tensor(eps))
    return div(dot, denom)


def periodic_delta(a: Tensor, box: Array) -> Tensor:
    """Map raw displacements into the minimum image, component-wise.

    Forward is (x + L/2) mod L - L/2 per axis; the map is an identity plus a
    piecewise-constant shift, so the gradient passes through unchanged.
    """
    box = np.asarray(box, dtype=np.float64)

    def backward():
        if a.requires_grad:
            _accumulate(a, out.grad)

    out = _make(np.mod(a.data + 0.5 * box, box) - 0.5 * box, (a,), backward)
    return out


# ---------------------------------------------------------------------------
# backward pass and gradient utilities
# ---------------------------------------------------------------------------

def backward(loss: Tensor) -> None:
    """Populate ``grad`` on every reachable tensor with d(loss)/d(tensor).

    Grads accumulate: zero them between passes if reuse matters. Leaves the
    loss does not reach keep whatever grad buffer they already had.
    """
    if loss.data.shape != ():
        raise ValueError(f"backward expects a scalar loss, got shape {loss.data.shape}")

    # iterative post-order DFS: recursion would overflow on long batch tapes
    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(loss, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for parent in node._parents:
            if id(parent) not in seen:
                stack.append((parent, False))

    loss.grad = np.ones((), dtype=np.float64)
    for node in reversed(order):
        if node._backward is not None and node.grad is not None:
            node._backward()


def clip_global_norm(grads: Sequence[Array], max_norm: float) -> tuple[list[Array], float]:
    """Scale all grads by max_norm/g when the global L2 norm g exceeds max_norm.

    Returns the (possibly) scaled grads and the pre-clip global norm.
    """
    if max_norm <= 0.0:
        raise ValueError("max_norm must be positive")
    total = np.sqrt(sum(float(np.sum(g * g)) for g in grads))
    if total > max_norm:
        scale = max_norm / total
        return [g * scale for g in grads], total
    return list(grads), total


def central_difference(f: Callable[[Array], float], x: Array, h: float = 1e-5) -> Array:
    """Central finite-difference gradient of a scalar function of one array."""
    x = np.asarray(x, dtype=np.float64)
    grad = np.zeros_like(x)
    flat = grad.reshape(-1)
    xf = x.reshape(-1)
    for k in range(xf.size):
        orig = xf[k]
        xf[k] = orig + h
        up = f(x)
        xf[k] = orig - h
        down = f(x)
        xf[k] = orig
        flat[k] = (up - down) / (2.0 * h)
    return grad


def relative_error(a: Array, b: Array, floor: float = 0.0) -> float:
    """Norm-based relative difference.

    ``floor`` bounds the denominator from below so that comparing two
    numerically-zero vectors (e.g. an exactly-zero analytic gradient against
    float noise) does not blow up to 1.
    """
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    denom = max(np.linalg.norm(a) + np.linalg.norm(b), floor)
    if denom == 0.0:
        return 0.0
    return float(np.linalg.norm(a - b) / denom)
