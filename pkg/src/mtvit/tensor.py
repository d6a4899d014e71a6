"""Dense tensors with reverse-mode automatic differentiation.

Tensors wrap numpy arrays; every operation records its inputs and a
vector-Jacobian closure so :func:`backward` can replay the graph in
reverse. The op set is exactly what the backbone, heads, and losses
need: matmul, elementwise arithmetic, exp/log/tanh/relu/sigmoid,
softmax, axis reductions, 2x2 average pooling, bilinear resize,
gathers, concatenation, layer norm, plus median/abs/maximum for the
affine-invariant depth loss and a fused stable BCE-with-logits.

Precision is a process-wide switch: float64 for gradient-check builds,
float32 for training builds (see :func:`set_default_dtype`).

Forward evaluation is pure — no op mutates its inputs — so identical
inputs always produce bit-identical outputs, and evaluating distinct
graphs from multiple threads is safe.
"""

from __future__ import annotations

import itertools
from contextlib import contextmanager
from typing import Callable, Iterable, Sequence

import numpy as np

from .errors import ConfigError, MissingGraphError, ShapeError
from .rng import stream

_DTYPES = {"float32": np.float32, "float64": np.float64}
_default_dtype = np.float64
_grad_enabled = True
_uid_counter = itertools.count()


def set_default_dtype(name: str) -> None:
    """Select the scalar type new tensors are created with."""
    global _default_dtype
    if name not in _DTYPES:
        raise ConfigError("precision", f"unknown dtype {name!r}; expected float32 or float64")
    _default_dtype = _DTYPES[name]


def default_dtype() -> np.dtype:
    return np.dtype(_default_dtype)


@contextmanager
def using_dtype(name: str):
    global _default_dtype
    prev = _default_dtype
    set_default_dtype(name)
    try:
        yield
    finally:
        _default_dtype = prev


@contextmanager
def no_grad():
    """Disable graph recording (evaluation / probing fast path)."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


class Tensor:
    """A dense array plus optional autodiff bookkeeping.

    Leaf tensors (parameters, data) have no parents; interior nodes
    carry a ``_vjp`` closure mapping the output gradient to per-parent
    gradients. Data is treated as immutable once wrapped.
    """

    __slots__ = ("data", "requires_grad", "_parents", "_vjp", "_uid")

    def __init__(self, data, requires_grad: bool = False):
        arr = np.asarray(data, dtype=_default_dtype)
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self._parents: tuple[Tensor, ...] = ()
        self._vjp: Callable | None = None
        self._uid = next(_uid_counter)

    # -- introspection -------------------------------------------------

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
            raise ShapeError(f"item() needs a scalar, got shape {self.shape}")
        return float(self.data.reshape(()))

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.data.dtype}{flag})"

    # -- operator sugar (definitions live in module functions) ----------

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return neg(self)

    def __pow__(self, p):
        return power(self, p)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, key):
        return getitem(self, key)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        return tmean(self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape):
        return reshape(self, *shape)

    def transpose(self, *axes):
        return transpose(self, axes if axes else None)


def _as_tensor(x) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=_default_dtype))


def _make(data: np.ndarray, parents: Sequence[Tensor], vjp: Callable) -> Tensor:
    out = Tensor.__new__(Tensor)
    out.data = data
    out._uid = next(_uid_counter)
    if _grad_enabled and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._vjp = vjp
    else:
        out.requires_grad = False
        out._parents = ()
        out._vjp = None
    return out


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum a broadcasted gradient back down to ``shape``."""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad


# -- elementwise arithmetic ---------------------------------------------


def add(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    out = a.data + b.data
    na, nb = a.requires_grad, b.requires_grad

    def vjp(g):
        return (_unbroadcast(g, a.shape) if na else None,
                _unbroadcast(g, b.shape) if nb else None)

    return _make(out, (a, b), vjp)


def sub(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    out = a.data - b.data
    na, nb = a.requires_grad, b.requires_grad

    def vjp(g):
        return (_unbroadcast(g, a.shape) if na else None,
                _unbroadcast(-g, b.shape) if nb else None)

    return _make(out, (a, b), vjp)


def mul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    out = a.data * b.data
    na, nb = a.requires_grad, b.requires_grad

    def vjp(g):
        return (_unbroadcast(g * b.data, a.shape) if na else None,
                _unbroadcast(g * a.data, b.shape) if nb else None)

    return _make(out, (a, b), vjp)


def div(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    out = a.data / b.data
    na, nb = a.requires_grad, b.requires_grad

    def vjp(g):
        ga = _unbroadcast(g / b.data, a.shape) if na else None
        gb = _unbroadcast(-g * a.data / (b.data * b.data), b.shape) if nb else None
        return ga, gb

    return _make(out, (a, b), vjp)


def neg(a) -> Tensor:
    a = _as_tensor(a)
    return _make(-a.data, (a,), lambda g: (-g,))


def power(a, p: float) -> Tensor:
    a = _as_tensor(a)
    p = float(p)
    out = a.data**p

    def vjp(g):
        return (g * p * a.data ** (p - 1.0),)

    return _make(out, (a,), vjp)


def maximum(a, b) -> Tensor:
    """Elementwise max; ties route the gradient to the first argument."""
    a, b = _as_tensor(a), _as_tensor(b)
    take_a = a.data >= b.data
    out = np.where(take_a, a.data, b.data)

    def vjp(g):
        ga = _unbroadcast(np.where(take_a, g, 0.0), a.shape)
        gb = _unbroadcast(np.where(take_a, 0.0, g), b.shape)
        return ga, gb

    return _make(out, (a, b), vjp)


def where(cond: np.ndarray, a, b) -> Tensor:
    """Select by a boolean array (the condition itself is not differentiated)."""
    a, b = _as_tensor(a), _as_tensor(b)
    cond = np.asarray(cond, dtype=bool)
    out = np.where(cond, a.data, b.data)

    def vjp(g):
        ga = _unbroadcast(np.where(cond, g, 0.0), a.shape)
        gb = _unbroadcast(np.where(cond, 0.0, g), b.shape)
        return ga, gb

    return _make(out, (a, b), vjp)


def absolute(a) -> Tensor:
    a = _as_tensor(a)
    out = np.abs(a.data)

    def vjp(g):
        return (g * np.sign(a.data),)

    return _make(out, (a,), vjp)


# -- transcendental / activations -----------------------------------------


def exp(a) -> Tensor:
    a = _as_tensor(a)
    out = np.exp(a.data)
    return _make(out, (a,), lambda g: (g * out,))


def log(a) -> Tensor:
    a = _as_tensor(a)
    out = np.log(a.data)
    return _make(out, (a,), lambda g: (g / a.data,))


def tanh(a) -> Tensor:
    a = _as_tensor(a)
    out = np.tanh(a.data)
    return _make(out, (a,), lambda g: (g * (1.0 - out * out),))


def relu(a) -> Tensor:
    a = _as_tensor(a)
    mask = a.data > 0
    out = np.where(mask, a.data, 0.0)
    return _make(out, (a,), lambda g: (np.where(mask, g, 0.0),))


def _sigmoid(x: np.ndarray) -> np.ndarray:
    # evaluate via exp of a non-positive argument only
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def sigmoid(a) -> Tensor:
    a = _as_tensor(a)
    out = _sigmoid(a.data)
    return _make(out, (a,), lambda g: (g * out * (1.0 - out),))


def softmax(a, axis: int = -1) -> Tensor:
    a = _as_tensor(a)
    out = a.data - a.data.max(axis=axis, keepdims=True)
    np.exp(out, out=out)
    out /= out.sum(axis=axis, keepdims=True)

    def vjp(g):
        tmp = g * out
        inner = tmp.sum(axis=axis, keepdims=True)
        np.subtract(g, inner, out=tmp)
        tmp *= out
        return (tmp,)

    return _make(out, (a,), vjp)


def log_softmax(a, axis: int = -1) -> Tensor:
    a = _as_tensor(a)
    shifted = a.data - a.data.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=axis, keepdims=True))
    out = shifted - lse

    def vjp(g):
        return (g - np.exp(out) * g.sum(axis=axis, keepdims=True),)

    return _make(out, (a,), vjp)


def bce_with_logits(logits, targets) -> Tensor:
    """Elementwise binary cross-entropy computed in logit space.

    ``max(x,0) - x*t + log(1 + exp(-|x|))``, which never overflows and
    never evaluates log of a rounded-to-zero probability.
    """
    x, t = _as_tensor(logits), _as_tensor(targets)
    out = np.maximum(x.data, 0.0) - x.data * t.data + np.log1p(np.exp(-np.abs(x.data)))

    def vjp(g):
        gx = _unbroadcast(g * (_sigmoid(x.data) - t.data), x.shape)
        gt = _unbroadcast(g * (-x.data), t.shape)
        return gx, gt

    return _make(out, (x, t), vjp)


# -- reductions ------------------------------------------------------------


def _norm_axes(axis, ndim: int) -> tuple[int, ...]:
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(a % ndim for a in axis)


def tsum(a, axis=None, keepdims: bool = False) -> Tensor:
    a = _as_tensor(a)
    axes = _norm_axes(axis, a.ndim)
    out = a.data.sum(axis=axes, keepdims=keepdims)

    def vjp(g):
        if not keepdims:
            g = np.expand_dims(g, axes) if axes else g
        return (np.broadcast_to(g, a.shape),)

    return _make(out, (a,), vjp)


def tmean(a, axis=None, keepdims: bool = False) -> Tensor:
    a = _as_tensor(a)
    axes = _norm_axes(axis, a.ndim)
    count = int(np.prod([a.shape[i] for i in axes])) if axes else 1
    out = a.data.mean(axis=axes, keepdims=keepdims)

    def vjp(g):
        if not keepdims:
            g = np.expand_dims(g, axes) if axes else g
        return (np.broadcast_to(g, a.shape) / count,)

    return _make(out, (a,), vjp)


def median_last(a, keepdims: bool = False) -> Tensor:
    """Median over the last axis; even lengths average the two middle
    order statistics and split the gradient 0.5/0.5 between them."""
    a = _as_tensor(a)
    n = a.shape[-1]
    order = np.argsort(a.data, axis=-1, kind="stable")
    if n % 2 == 1:
        mid = order[..., n // 2 : n // 2 + 1]
        out = np.take_along_axis(a.data, mid, axis=-1)
        picks, weights = (mid,), (1.0,)
    else:
        lo = order[..., n // 2 - 1 : n // 2]
        hi = order[..., n // 2 : n // 2 + 1]
        out = 0.5 * (
            np.take_along_axis(a.data, lo, axis=-1) + np.take_along_axis(a.data, hi, axis=-1)
        )
        picks, weights = (lo, hi), (0.5, 0.5)
    if not keepdims:
        out = out[..., 0]

    def vjp(g):
        if not keepdims:
            g = g[..., None]
        ga = np.zeros_like(a.data)
        for idx, w in zip(picks, weights):
            cur = np.take_along_axis(ga, idx, axis=-1)
            np.put_along_axis(ga, idx, cur + w * g, axis=-1)
        return (ga,)

    return _make(out, (a,), vjp)


# -- shape / indexing -------------------------------------------------------


def reshape(a, *shape) -> Tensor:
    a = _as_tensor(a)
    if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
        shape = tuple(shape[0])
    out = a.data.reshape(shape)
    return _make(out, (a,), lambda g: (g.reshape(a.shape),))


def transpose(a, axes=None) -> Tensor:
    a = _as_tensor(a)
    if axes is None:
        axes = tuple(reversed(range(a.ndim)))
    axes = tuple(axes)
    inverse = tuple(np.argsort(axes))
    out = a.data.transpose(axes)
    return _make(out, (a,), lambda g: (g.transpose(inverse),))


def getitem(a, key) -> Tensor:
    """Basic slicing/integer indexing (no fancy index arrays)."""
    a = _as_tensor(a)
    out = a.data[key]

    def vjp(g):
        ga = np.zeros_like(a.data)
        ga[key] += g
        return (ga,)

    return _make(out, (a,), vjp)


def concat(tensors: Iterable, axis: int = 0) -> Tensor:
    ts = [_as_tensor(t) for t in tensors]
    out = np.concatenate([t.data for t in ts], axis=axis)
    sizes = [t.shape[axis] for t in ts]
    splits = np.cumsum(sizes)[:-1]

    def vjp(g):
        return tuple(np.split(g, splits, axis=axis))

    return _make(out, ts, vjp)


def gather_rows(table, indices) -> Tensor:
    """Entry lookup ``table[indices]`` along axis 0 (embedding gather,
    batch-row sharing); repeated rows accumulate their gradients."""
    table = _as_tensor(table)
    idx = np.asarray(indices, dtype=np.int64)
    out = table.data[idx]
    tail = table.shape[1:]

    def vjp(g):
        gt = np.zeros_like(table.data)
        np.add.at(gt, idx.reshape(-1), g.reshape(-1, *tail))
        return (gt,)

    return _make(out, (table,), vjp)


def take_along_last(a, indices) -> Tensor:
    """Pick one entry per row along the last axis (e.g. target logits)."""
    a = _as_tensor(a)
    idx = np.asarray(indices, dtype=np.int64)[..., None]
    out = np.take_along_axis(a.data, idx, axis=-1)[..., 0]

    def vjp(g):
        ga = np.zeros_like(a.data)
        np.put_along_axis(ga, idx, g[..., None], axis=-1)
        return (ga,)

    return _make(out, (a,), vjp)


# -- linear algebra ---------------------------------------------------------


def matmul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeError(f"matmul needs >=2-d operands, got {a.shape} @ {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul inner dims differ: {a.shape} @ {b.shape}")
    out = np.matmul(a.data, b.data)
    na, nb = a.requires_grad, b.requires_grad

    def vjp(g):
        ga = _unbroadcast(np.matmul(g, np.swapaxes(b.data, -1, -2)), a.shape) if na else None
        gb = _unbroadcast(np.matmul(np.swapaxes(a.data, -1, -2), g), b.shape) if nb else None
        return ga, gb

    return _make(out, (a, b), vjp)


def linear(x, w, b) -> Tensor:
    """Fused ``x @ w + b`` for a 2-d ``x``; one graph node instead of two."""
    x, w, b = _as_tensor(x), _as_tensor(w), _as_tensor(b)
    if x.ndim != 2 or w.ndim != 2 or b.ndim != 1:
        raise ShapeError(f"linear expects (N,K) @ (K,M) + (M,), got {x.shape}, {w.shape}, {b.shape}")
    out = np.matmul(x.data, w.data)
    out += b.data
    nx = x.requires_grad

    def vjp(g):
        gx = np.matmul(g, w.data.T) if nx else None
        return gx, np.matmul(x.data.T, g), g.sum(axis=0)

    return _make(out, (x, w, b), vjp)


def layer_norm(x, gamma, beta, eps: float = 1e-5) -> Tensor:
    """Normalize the last axis to zero mean / unit variance, then scale-shift."""
    x, gamma, beta = _as_tensor(x), _as_tensor(gamma), _as_tensor(beta)
    mu = x.data.mean(axis=-1, keepdims=True)
    xhat = x.data - mu
    var = (xhat * xhat).mean(axis=-1, keepdims=True)
    var += eps
    inv = 1.0 / np.sqrt(var)
    xhat *= inv
    out = xhat * gamma.data
    out += beta.data

    def vjp(g):
        sum_axes = tuple(range(g.ndim - 1))
        ggamma = (g * xhat).sum(axis=sum_axes)
        gbeta = g.sum(axis=sum_axes)
        gx = g * gamma.data
        m2 = (gx * xhat).mean(axis=-1, keepdims=True)
        gx -= gx.mean(axis=-1, keepdims=True)
        gx -= xhat * m2
        gx *= inv
        return gx, ggamma, gbeta

    return _make(out, (x, gamma, beta), vjp)


# -- spatial ops (operate on the last two axes) ------------------------------


def avg_pool2(x) -> Tensor:
    """2x2 average pooling over the last two axes (both must be even)."""
    x = _as_tensor(x)
    *lead, h, w = x.shape
    if h % 2 or w % 2:
        raise ShapeError(f"avg_pool2 needs even spatial dims, got {h}x{w}")
    r = x.data.reshape(*lead, h // 2, 2, w // 2, 2)
    out = r.mean(axis=(-3, -1))

    def vjp(g):
        g4 = g[..., :, None, :, None] * 0.25
        return (np.broadcast_to(g4, (*lead, h // 2, 2, w // 2, 2)).reshape(x.shape),)

    return _make(out, (x,), vjp)


_resize_cache: dict[tuple[int, int], np.ndarray] = {}


def _resize_matrix(n_in: int, n_out: int) -> np.ndarray:
    """1-d bilinear interpolation weights with half-pixel center alignment."""
    key = (n_in, n_out)
    mat = _resize_cache.get(key)
    if mat is None:
        src = (np.arange(n_out, dtype=np.float64) + 0.5) * (n_in / n_out) - 0.5
        src = np.clip(src, 0.0, n_in - 1.0)
        lo = np.floor(src).astype(np.int64)
        hi = np.minimum(lo + 1, n_in - 1)
        w_hi = src - lo
        mat = np.zeros((n_out, n_in), dtype=np.float64)
        mat[np.arange(n_out), lo] += 1.0 - w_hi
        mat[np.arange(n_out), hi] += w_hi
        _resize_cache[key] = mat
    return mat


def _apply_rows(mat: np.ndarray, x: np.ndarray) -> np.ndarray:
    """mat @ x over the second-to-last axis, via one flat gemm."""
    *lead, h, w = x.shape
    swapped = np.swapaxes(x, -1, -2).reshape(-1, h)
    out = swapped @ mat.T
    return np.swapaxes(out.reshape(*lead, w, mat.shape[0]), -1, -2)


def _apply_cols(mat: np.ndarray, x: np.ndarray) -> np.ndarray:
    """x @ mat.T over the last axis, via one flat gemm."""
    *lead, h, w = x.shape
    return (x.reshape(-1, w) @ mat.T).reshape(*lead, h, mat.shape[0])


def bilinear_resize(x, out_h: int, out_w: int) -> Tensor:
    """Bilinear resize of the last two axes (half-pixel centers, so
    resizing to the same shape is the identity)."""
    x = _as_tensor(x)
    h, w = x.shape[-2], x.shape[-1]
    wh = _resize_matrix(h, out_h).astype(x.data.dtype)
    ww = _resize_matrix(w, out_w).astype(x.data.dtype)
    out = _apply_cols(ww, _apply_rows(wh, x.data))

    def vjp(g):
        return (_apply_cols(ww.T, _apply_rows(wh.T, g)),)

    return _make(out, (x,), vjp)


# -- backward pass -----------------------------------------------------------


class GradientMap:
    """Gradients of one scalar loss with respect to every reachable leaf.

    Keys are leaf tensors (parameters / inputs with ``requires_grad``);
    a leaf that does not appear was not reachable from the loss.
    """

    def __init__(self, grads: dict[int, np.ndarray]):
        self._grads = grads

    def of(self, t: Tensor) -> np.ndarray:
        return self._grads[t._uid]

    def get(self, t: Tensor, default=None):
        return self._grads.get(t._uid, default)

    def __contains__(self, t: Tensor) -> bool:
        return t._uid in self._grads

    def __len__(self) -> int:
        return len(self._grads)


def backward(loss: Tensor) -> GradientMap:
    """Reverse-mode gradients of a scalar loss.

    Pure: repeated calls on the same graph return identical values and
    nothing on the tensors is mutated.
    """
    if not isinstance(loss, Tensor):
        raise TypeError("backward expects a Tensor")
    if loss.data.size != 1:
        raise ShapeError(f"backward needs a scalar loss, got shape {loss.shape}")
    if loss._vjp is None:
        if loss.requires_grad:
            return GradientMap({loss._uid: np.ones_like(loss.data)})
        raise MissingGraphError("loss has no recorded computation graph")

    # iterative post-order topological sort
    topo: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(loss, False)]
    while stack:
        node, processed = stack.pop()
        if processed:
            topo.append(node)
            continue
        if node._uid in seen:
            continue
        seen.add(node._uid)
        stack.append((node, True))
        for p in node._parents:
            if p.requires_grad and p._uid not in seen:
                stack.append((p, False))

    grads: dict[int, np.ndarray] = {loss._uid: np.ones_like(loss.data)}
    leaves: dict[int, np.ndarray] = {}
    for node in reversed(topo):
        g = grads.pop(node._uid, None)
        if g is None:
            continue
        if node._vjp is None:
            leaves[node._uid] = g
            continue
        parent_grads = node._vjp(g)
        for parent, pg in zip(node._parents, parent_grads):
            if pg is None or not parent.requires_grad:
                continue
            acc = grads.get(parent._uid)
            grads[parent._uid] = pg if acc is None else acc + pg
    return GradientMap(leaves)


# -- verification and initialization ------------------------------------------


def finite_diff_check(
    f: Callable[[Sequence[Tensor]], Tensor],
    params: Sequence[Tensor],
    step: float = 1e-5,
) -> float:
    """Max relative error between analytic and central-difference gradients.

    ``f`` must be a deterministic scalar-valued function of ``params``;
    the error for each coordinate is |analytic - numeric| / max(1, |analytic|).
    """
    if step <= 0:
        raise ValueError("step must be positive")
    loss = f(params)
    if not np.all(np.isfinite(loss.data)):
        raise FloatingPointError("f produced a non-finite value")
    grads = backward(loss)

    worst = 0.0
    for p in params:
        analytic = grads.get(p)
        if analytic is None:
            analytic = np.zeros_like(p.data)
        base = p.data
        for idx in np.ndindex(base.shape):
            orig = base[idx]
            with no_grad():
                base[idx] = orig + step
                hi = f(params).item()
                base[idx] = orig - step
                lo = f(params).item()
                base[idx] = orig
            numeric = (hi - lo) / (2.0 * step)
            if not np.isfinite(numeric):
                raise FloatingPointError("f produced a non-finite value during differencing")
            a = float(analytic[idx])
            worst = max(worst, abs(a - numeric) / max(1.0, abs(a)))
    return worst


_INIT_SCHEMES = ("uniform-fan-in", "zeros", "ones")


def seeded_init(dims: Sequence[int], scheme: str, seed: int, requires_grad: bool = False) -> Tensor:
    """Deterministic parameter initialization.

    ``uniform-fan-in`` draws U(-b, b) with b = sqrt(6 / dims[0]); the
    same (dims, scheme, seed) triple always yields bit-identical values.
    """
    dims = tuple(int(d) for d in dims)
    if any(d <= 0 for d in dims):
        raise ShapeError(f"dims must be positive, got {dims}")
    if scheme == "zeros":
        data = np.zeros(dims)
    elif scheme == "ones":
        data = np.ones(dims)
    elif scheme == "uniform-fan-in":
        bound = float(np.sqrt(6.0 / dims[0]))
        data = stream(seed, "init").uniform(-bound, bound, size=dims)
    else:
        raise ConfigError("init.scheme", f"unknown scheme {scheme!r}; expected one of {_INIT_SCHEMES}")
    return Tensor(data, requires_grad=requires_grad)
