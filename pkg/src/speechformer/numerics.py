"""Dense float64 tensors with tape-free reverse-mode differentiation.

Every layer in the package is written against the operations defined here.
Values are numpy arrays in row-major order; each operation that involves a
tensor with ``requires_grad`` records its parents and a closure mapping the
output gradient to input gradients. :func:`backward` walks the recorded graph
in reverse topological order.

Operations accept leading batch axes wherever that is natural (``matmul``,
``softmax``, ``layer_norm``, ``conv1d`` all act on the trailing axes), which
is how the model code batches utterances.
"""

from __future__ import annotations

import contextlib
import logging
import math
from dataclasses import dataclass, field
from typing import Callable, Iterator, Sequence

import numpy as np

logger = logging.getLogger(__name__)


class _Runtime:
    grad_enabled = True
    live_floats = 0
    peak_floats = 0
    kinks: "KinkStats | None" = None


_rt = _Runtime()


@contextlib.contextmanager
def no_grad() -> Iterator[None]:
    """Disable graph recording inside the block (inference)."""
    prev = _rt.grad_enabled
    _rt.grad_enabled = False
    try:
        yield
    finally:
        _rt.grad_enabled = prev


def is_grad_enabled() -> bool:
    return _rt.grad_enabled


@contextlib.contextmanager
def track_memory() -> Iterator["MemoryStats"]:
    """Record the peak number of float64 values held by live tensors.

    The peak is measured relative to what was alive when the block started.
    """
    stats = MemoryStats(baseline=_rt.live_floats)
    _rt.peak_floats = _rt.live_floats
    try:
        yield stats
    finally:
        stats.peak = _rt.peak_floats - stats.baseline


@dataclass
class MemoryStats:
    baseline: int
    peak: int = 0


@dataclass
class KinkStats:
    margin: float = math.inf


@contextlib.contextmanager
def track_kinks() -> Iterator[KinkStats]:
    """Record the smallest |input| seen by any ReLU inside the block.

    A finite-difference step larger than this margin can straddle a kink.
    """
    prev = _rt.kinks
    _rt.kinks = stats = KinkStats()
    try:
        yield stats
    finally:
        _rt.kinks = prev


class Tensor:
    """An n-dimensional float64 array with an optional gradient slot."""

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "op", "_size")

    def __init__(
        self,
        data,
        requires_grad: bool = False,
        _parents: tuple["Tensor", ...] = (),
        _backward: Callable | None = None,
        op: str = "leaf",
    ):
        arr = np.asarray(data, dtype=np.float64)
        self.data = arr
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self._parents = _parents
        self._backward = _backward
        self.op = op
        self._size = arr.size
        _rt.live_floats += arr.size
        if _rt.live_floats > _rt.peak_floats:
            _rt.peak_floats = _rt.live_floats

    def __del__(self):
        _rt.live_floats -= self._size

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        if self.data.size != 1:
            raise ValueError(f"item() needs a single-element tensor, got shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, op={self.op}, requires_grad={self.requires_grad})"

    # operator sugar
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

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def sum(self, axis=None, keepdims=False):
        return sum_(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        return transpose(self, axes)


def tensor(data, requires_grad: bool = False) -> Tensor:
    return Tensor(np.array(data, dtype=np.float64), requires_grad=requires_grad)


def parameter(data) -> Tensor:
    return Tensor(np.array(data, dtype=np.float64), requires_grad=True)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _make(data: np.ndarray, parents: tuple[Tensor, ...], backward: Callable, op: str) -> Tensor:
    if _rt.grad_enabled and any(p.requires_grad for p in parents):
        return Tensor(data, requires_grad=True, _parents=parents, _backward=backward, op=op)
    return Tensor(data)


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad


# ---------------------------------------------------------------------------
# graph traversal


@dataclass
class Graph:
    """Recorded operations reachable from an output, inputs before users."""

    nodes: list[Tensor] = field(default_factory=list)

    def index(self) -> dict[int, int]:
        return {id(n): i for i, n in enumerate(self.nodes)}


def graph_of(output: Tensor) -> Graph:
    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(output, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))
    return Graph(order)


def backward(loss: Tensor, grad: np.ndarray | None = None) -> None:
    """Accumulate d(loss)/d(leaf) into ``leaf.grad`` for every reachable leaf."""
    if grad is None:
        if loss.data.size != 1:
            raise ValueError(f"backward() needs a scalar loss, got shape {loss.shape}")
        grad = np.ones_like(loss.data)
    if not loss.requires_grad:
        return
    graph = graph_of(loss)
    grads: dict[int, np.ndarray] = {id(loss): np.asarray(grad, dtype=np.float64)}
    for node in reversed(graph.nodes):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node._backward is None:
            node.grad = g.copy() if node.grad is None else node.grad + g
            continue
        for parent, pg in zip(node._parents, node._backward(g)):
            if pg is None or not parent.requires_grad:
                continue
            key = id(parent)
            if key in grads:
                grads[key] = grads[key] + pg
            else:
                grads[key] = pg


# ---------------------------------------------------------------------------
# elementwise


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    sa, sb = a.shape, b.shape
    return _make(a.data + b.data, (a, b), lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)), "add")


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    sa, sb = a.shape, b.shape
    return _make(a.data - b.data, (a, b), lambda g: (_unbroadcast(g, sa), _unbroadcast(-g, sb)), "sub")


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    ad, bd = a.data, b.data

    def bw(g):
        return _unbroadcast(g * bd, ad.shape), _unbroadcast(g * ad, bd.shape)

    return _make(ad * bd, (a, b), bw, "mul")


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    ad, bd = a.data, b.data

    def bw(g):
        return _unbroadcast(g / bd, ad.shape), _unbroadcast(-g * ad / (bd * bd), bd.shape)

    return _make(ad / bd, (a, b), bw, "div")


def relu(x: Tensor) -> Tensor:
    pos = x.data > 0
    if _rt.kinks is not None and x.data.size:
        _rt.kinks.margin = min(_rt.kinks.margin, float(np.min(np.abs(x.data))))
    # np.maximum keeps NaN visible; np.where(x > 0, ...) would silently zero it
    return _make(np.maximum(x.data, 0.0), (x,), lambda g: (g * pos,), "relu")


def exp(x: Tensor) -> Tensor:
    out = np.exp(x.data)
    return _make(out, (x,), lambda g: (g * out,), "exp")


def log(x: Tensor) -> Tensor:
    xd = x.data
    return _make(np.log(xd), (x,), lambda g: (g / xd,), "log")


def sqrt(x: Tensor) -> Tensor:
    out = np.sqrt(x.data)
    return _make(out, (x,), lambda g: (g * 0.5 / out,), "sqrt")


def masked_fill(x: Tensor, mask: np.ndarray, value: float) -> Tensor:
    """Replace entries where ``mask`` is true; those entries get no gradient."""
    mask = np.broadcast_to(mask, x.shape)
    return _make(np.where(mask, value, x.data), (x,), lambda g: (np.where(mask, 0.0, g),), "masked_fill")


def dropout(x: Tensor, p: float, rng: np.random.Generator | None) -> Tensor:
    """Inverted dropout; the keep mask is drawn from ``rng`` so a run replays exactly."""
    if p <= 0.0:
        return x
    if not 0.0 <= p < 1.0:
        raise ValueError(f"dropout probability must be in [0, 1), got {p}")
    if rng is None:
        raise ValueError("dropout with p > 0 needs an explicit rng")
    keep = (rng.random(x.shape) >= p) / (1.0 - p)
    return _make(x.data * keep, (x,), lambda g: (g * keep,), "dropout")


# ---------------------------------------------------------------------------
# shape


def reshape(x: Tensor, shape: Sequence[int]) -> Tensor:
    old = x.shape
    return _make(x.data.reshape(shape), (x,), lambda g: (g.reshape(old),), "reshape")


def transpose(x: Tensor, axes: Sequence[int] | None = None) -> Tensor:
    axes = tuple(axes) if axes else tuple(reversed(range(x.ndim)))
    inv = tuple(np.argsort(axes))
    return _make(np.transpose(x.data, axes), (x,), lambda g: (np.transpose(g, inv),), "transpose")


def swapaxes(x: Tensor, a: int, b: int) -> Tensor:
    return _make(np.swapaxes(x.data, a, b), (x,), lambda g: (np.swapaxes(g, a, b),), "swapaxes")


def sum_(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    shape = x.shape

    def bw(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape).copy(),)

    return _make(np.sum(x.data, axis=axis, keepdims=keepdims), (x,), bw, "sum")


def mean(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    n = x.data.size if axis is None else np.prod([x.shape[a] for a in np.atleast_1d(axis)])
    return mul(sum_(x, axis=axis, keepdims=keepdims), 1.0 / float(n))


def concat(xs: Sequence[Tensor], axis: int = 0) -> Tensor:
    xs = [as_tensor(x) for x in xs]
    sizes = [x.shape[axis] for x in xs]
    splits = np.cumsum(sizes)[:-1]
    return _make(
        np.concatenate([x.data for x in xs], axis=axis),
        tuple(xs),
        lambda g: tuple(np.split(g, splits, axis=axis)),
        "concat",
    )


def take_rows(weight: Tensor, ids: np.ndarray) -> Tensor:
    """Embedding lookup: ``weight[ids]``; repeated ids accumulate gradient."""
    ids = np.asarray(ids, dtype=np.int64)
    shape = weight.shape

    def bw(g):
        gw = np.zeros(shape)
        np.add.at(gw, ids.reshape(-1), g.reshape(-1, shape[-1]))
        return (gw,)

    return _make(weight.data[ids], (weight,), bw, "take_rows")


def gather_last(x: Tensor, idx: np.ndarray) -> Tensor:
    """Pick ``x[..., idx[...]]`` along the last axis; ``idx`` has x's leading shape."""
    idx = np.asarray(idx, dtype=np.int64)[..., None]
    shape = x.shape

    def bw(g):
        gx = np.zeros(shape)
        np.put_along_axis(gx, idx, g[..., None], axis=-1)
        return (gx,)

    return _make(np.take_along_axis(x.data, idx, axis=-1)[..., 0], (x,), bw, "gather_last")


# ---------------------------------------------------------------------------
# linear algebra and layers


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product over the last two axes, numpy broadcasting on the rest."""
    a, b = as_tensor(a), as_tensor(b)
    ad, bd = a.data, b.data
    if ad.ndim < 2 or bd.ndim < 2 or ad.shape[-1] != bd.shape[-2]:
        raise ValueError(f"matmul dimension mismatch: {a.shape} x {b.shape}")

    def bw(g):
        ga = g @ np.swapaxes(bd, -1, -2)
        if bd.ndim == 2 and ad.ndim > 2:
            gb = ad.reshape(-1, ad.shape[-1]).T @ g.reshape(-1, g.shape[-1])
        else:
            gb = np.swapaxes(ad, -1, -2) @ g
        return _unbroadcast(ga, ad.shape), _unbroadcast(gb, bd.shape)

    return _make(ad @ bd, (a, b), bw, "matmul")


def linear(x: Tensor, weight: Tensor, bias: Tensor | None = None) -> Tensor:
    out = matmul(x, weight)
    return out if bias is None else add(out, bias)


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    z = x.data - np.max(x.data, axis=axis, keepdims=True)
    e = np.exp(z)
    out = e / np.sum(e, axis=axis, keepdims=True)

    def bw(g):
        return (out * (g - np.sum(g * out, axis=axis, keepdims=True)),)

    return _make(out, (x,), bw, "softmax")


def log_softmax(x: Tensor, axis: int = -1) -> Tensor:
    z = x.data - np.max(x.data, axis=axis, keepdims=True)
    out = z - np.log(np.sum(np.exp(z), axis=axis, keepdims=True))

    def bw(g):
        return (g - np.exp(out) * np.sum(g, axis=axis, keepdims=True),)

    return _make(out, (x,), bw, "log_softmax")


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalize the last axis to zero mean / unit variance, then scale and shift."""
    xd = x.data
    mu = xd.mean(axis=-1, keepdims=True)
    xc = xd - mu
    inv = 1.0 / np.sqrt((xc * xc).mean(axis=-1, keepdims=True) + eps)
    xhat = xc * inv
    gd = gain.data

    def bw(g):
        gxhat = g * gd
        gx = inv * (
            gxhat
            - gxhat.mean(axis=-1, keepdims=True)
            - xhat * (gxhat * xhat).mean(axis=-1, keepdims=True)
        )
        lead = tuple(range(g.ndim - 1))
        return gx, (g * xhat).sum(axis=lead), g.sum(axis=lead)

    return _make(xhat * gd + bias.data, (x, gain, bias), bw, "layer_norm")


def conv1d_output_length(T: int, kernel: int, stride: int, padding) -> int:
    left, right = (padding, padding) if isinstance(padding, int) else padding
    return (T + left + right - kernel) // stride + 1


def conv1d(x: Tensor, weight: Tensor, bias: Tensor | None, stride: int = 1, padding=0) -> Tensor:
    """1D cross-correlation over time.

    ``x`` is ``[..., T, C_in]``, ``weight`` is ``[K, C_in, C_out]``. ``padding``
    is either one int (both sides) or a ``(left, right)`` pair of zero frames.
    Output length is ``floor((T + left + right - K) / stride) + 1``.
    """
    left, right = (padding, padding) if isinstance(padding, int) else padding
    K, c_in, c_out = weight.shape
    T = x.shape[-2]
    if K < 1 or stride < 1 or left < 0 or right < 0:
        raise ValueError(f"invalid conv1d geometry: K={K} stride={stride} padding={padding}")
    if x.shape[-1] != c_in:
        raise ValueError(f"conv1d channel mismatch: input {x.shape}, weight {weight.shape}")
    if T + left + right < K:
        raise ValueError(f"conv1d would produce an empty output: T={T} padding={padding} K={K}")
    lead = x.shape[:-2]
    pad_width = [(0, 0)] * len(lead) + [(left, right), (0, 0)]
    xp = np.pad(x.data, pad_width) if (left or right) else x.data
    t_out = (xp.shape[-2] - K) // stride + 1
    span = (t_out - 1) * stride + 1
    w = weight.data
    # one matmul per kernel tap over the strided slice it sees
    out = xp[..., 0:span:stride, :] @ w[0]
    for k in range(1, K):
        out += xp[..., k : k + span : stride, :] @ w[k]
    if bias is not None:
        out += bias.data

    def bw(g):
        g2 = g.reshape(-1, c_out)
        gw = np.empty_like(w)
        gxp = np.zeros(xp.shape)
        for k in range(K):
            xs = xp[..., k : k + span : stride, :]
            gw[k] = xs.reshape(-1, c_in).T @ g2
            gxp[..., k : k + span : stride, :] += g @ w[k].T
        gx = gxp[..., left : left + T, :]
        gb = g2.sum(axis=0) if bias is not None else None
        return gx, gw, gb

    parents = (x, weight) if bias is None else (x, weight, bias)
    return _make(out, parents, (lambda g: bw(g)[:2]) if bias is None else bw, "conv1d")


# ---------------------------------------------------------------------------
# gradient checking


@dataclass
class GradCheckReport:
    max_rel_error: dict[str, float]
    tol: float
    passed: bool

    @property
    def worst(self) -> float:
        return max(self.max_rel_error.values(), default=0.0)


def rel_error(analytic: np.ndarray, numeric: np.ndarray, floor: float = 1e-10) -> float:
    """Max-norm error of ``analytic`` against ``numeric`` relative to their scale."""
    analytic, numeric = np.asarray(analytic), np.asarray(numeric)
    if analytic.size == 0:
        return 0.0
    scale = max(np.max(np.abs(analytic)), np.max(np.abs(numeric)), floor)
    return float(np.max(np.abs(analytic - numeric)) / scale)


def numeric_grad(f: Callable[[], Tensor], x: Tensor, h: float = 1e-5, index=None) -> np.ndarray:
    """Central differences of scalar ``f()`` w.r.t. ``x`` (all entries or a subset of flat indices)."""
    if not x.data.flags.c_contiguous:
        x.data = np.ascontiguousarray(x.data)
    flat = x.data.reshape(-1)
    which = range(flat.size) if index is None else index
    out = np.zeros(flat.size if index is None else len(index))
    with no_grad():
        for j, i in enumerate(which):
            orig = flat[i]
            flat[i] = orig + h
            fp = f().item()
            flat[i] = orig - h
            fm = f().item()
            flat[i] = orig
            out[j] = (fp - fm) / (2 * h)
    return out.reshape(x.shape) if index is None else out


def grad_check(
    f: Callable[..., Tensor],
    inputs: dict[str, Tensor] | Sequence[Tensor],
    h: float = 1e-5,
    tol: float = 1e-5,
    seed: int = 0,
) -> GradCheckReport:
    """Compare analytic gradients of ``f(*inputs)`` against central differences.

    Non-scalar outputs are reduced with a fixed random weighting so that the
    whole Jacobian participates, not only its column sums.
    """
    named = dict(inputs) if isinstance(inputs, dict) else {f"x{i}": t for i, t in enumerate(inputs)}
    args = list(named.values())
    for t in args:
        t.requires_grad = True
        t.grad = None
    probe = f(*args)
    weights = np.random.default_rng(seed).standard_normal(probe.shape)

    def scalar() -> Tensor:
        out = f(*args)
        return sum_(mul(out, weights)) if out.size != 1 or out.ndim else out

    loss = scalar()
    backward(loss)
    errors = {}
    for name, t in named.items():
        analytic = t.grad if t.grad is not None else np.zeros(t.shape)
        errors[name] = rel_error(analytic, numeric_grad(scalar, t, h))
    return GradCheckReport(errors, tol, all(e <= tol for e in errors.values()))


def sampled_grad_check(
    f: Callable[[], Tensor],
    params: dict[str, Tensor],
    entries: int = 4,
    h: float = 1e-5,
    tol: float = 1e-4,
    seed: int = 0,
    rel_floor: float = 1e-3,
) -> GradCheckReport:
    """Finite-difference check of scalar ``f()`` on a few entries of each parameter.

    Every tensor contributes its largest-magnitude analytic entry plus
    ``entries - 1`` random ones; errors are relative to that largest entry,
    floored at ``rel_floor`` times the largest gradient anywhere in the model
    (some weights, e.g. key biases, have an exactly zero gradient).
    Meant for whole models, where perturbing every weight is too slow.
    """
    for p in params.values():
        p.requires_grad = True
        p.grad = None
    backward(f())
    rng = np.random.default_rng(seed)
    floor = rel_floor * max((np.max(np.abs(p.grad)) for p in params.values() if p.grad is not None), default=1.0)
    errors = {}
    for name, p in params.items():
        analytic = (p.grad if p.grad is not None else np.zeros(p.shape)).reshape(-1)
        top = int(np.argmax(np.abs(analytic)))
        rest = rng.choice(analytic.size, size=min(entries - 1, analytic.size), replace=False)
        index = [top] + [int(i) for i in rest if i != top]
        numeric = numeric_grad(f, p, h, index)
        scale = max(abs(analytic[top]), np.max(np.abs(numeric)), floor, 1e-12)
        errors[name] = float(np.max(np.abs(analytic[index] - numeric)) / scale)
    return GradCheckReport(errors, tol, all(e <= tol for e in errors.values()))
