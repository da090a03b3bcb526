"""Dense tensors with reverse-mode automatic differentiation.

numpy owns the storage and the raw arithmetic; the graph, the backward
rules, and the Adam optimizer live here. Everything is deterministic:
same inputs and seeds give bit-identical results at a fixed precision.
float32 is the training dtype, float64 the verification dtype.
"""

from __future__ import annotations

import contextlib
import logging
from typing import Iterable, Sequence

import numpy as np

logger = logging.getLogger(__name__)

COSINE_EPS = 1e-8    # denominator guard for cosine similarity
NORM_TINY = 1e-20    # additive guard inside sqrt so zero vectors get zero grads


class DimensionError(ValueError):
    """Shapes do not line up for the requested operation."""


class ContractError(RuntimeError):
    """An operation was called outside its stated preconditions."""


class NonFiniteError(ContractError):
    """A forward op produced NaN or Inf."""


_DEFAULT_DTYPE = np.float32
_GRAD_ENABLED = True
_FINITE_CHECKS = True


def set_default_dtype(dtype) -> None:
    global _DEFAULT_DTYPE
    dtype = np.dtype(dtype)
    if dtype not in (np.dtype(np.float32), np.dtype(np.float64)):
        raise ContractError(f"unsupported dtype {dtype}")
    _DEFAULT_DTYPE = dtype.type


def default_dtype():
    return _DEFAULT_DTYPE


@contextlib.contextmanager
def use_dtype(dtype):
    """Temporarily switch the default dtype (verification runs use float64)."""
    global _DEFAULT_DTYPE
    old = _DEFAULT_DTYPE
    set_default_dtype(dtype)
    try:
        yield
    finally:
        _DEFAULT_DTYPE = old


@contextlib.contextmanager
def no_grad():
    """Disable graph recording; forward values are unchanged."""
    global _GRAD_ENABLED
    old = _GRAD_ENABLED
    _GRAD_ENABLED = False
    try:
        yield
    finally:
        _GRAD_ENABLED = old


@contextlib.contextmanager
def finite_checks(enabled: bool):
    global _FINITE_CHECKS
    old = _FINITE_CHECKS
    _FINITE_CHECKS = enabled
    try:
        yield
    finally:
        _FINITE_CHECKS = old


class Tensor:
    """A dense array plus an optional place in the autodiff graph.

    Ops never mutate their inputs. Tensors created while grad is enabled
    and fed from at least one requires_grad input carry a backward
    closure; calling ``backward()`` on a scalar fills ``grad`` buffers of
    every reachable requires_grad tensor.
    """

    __slots__ = ("data", "requires_grad", "grad", "_parents", "_bw")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        if isinstance(data, Tensor):
            raise ContractError("wrap raw arrays, not Tensors")
        was_array = isinstance(data, (np.ndarray, np.generic))
        arr = np.asarray(data)
        if dtype is not None:
            arr = arr.astype(dtype, copy=False)
        elif not was_array or arr.dtype not in (np.dtype(np.float32), np.dtype(np.float64)):
            # lists and scalars adopt the default dtype; arrays keep theirs
            arr = arr.astype(_DEFAULT_DTYPE)
        if _FINITE_CHECKS and not np.isfinite(arr).all():
            raise NonFiniteError(f"non-finite values in tensor of shape {arr.shape}")
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self._parents: tuple = ()
        self._bw = None

    # -- basic introspection ------------------------------------------------

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    @property
    def dtype(self):
        return self.data.dtype

    def item(self) -> float:
        if self.data.size != 1:
            raise ContractError("item() needs a single-element tensor")
        return float(self.data.reshape(()))

    def detach(self) -> "Tensor":
        return Tensor(self.data, requires_grad=False)

    def copy(self) -> "Tensor":
        return Tensor(self.data.copy(), requires_grad=False)

    def __repr__(self):
        return f"Tensor(shape={self.shape}, dtype={self.data.dtype}, grad={self.requires_grad})"

    # -- autodiff -----------------------------------------------------------

    def backward(self) -> None:
        """Reverse pass from a scalar. Non-scalar roots are a contract error."""
        if self.data.size != 1:
            raise ContractError("backward() requires a scalar loss")
        topo: list[Tensor] = []
        seen: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(self, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                topo.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                if id(p) not in seen:
                    stack.append((p, False))
        self.grad = np.ones_like(self.data)
        for node in reversed(topo):
            if node._bw is not None and node.grad is not None:
                node._bw(node.grad)

    # -- operator sugar -----------------------------------------------------

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

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, key):
        return take(self, key)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        return tmean(self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes or None)

    @property
    def T(self):
        return transpose(self, None)


def _coerce_pair(a, b):
    """Make both operands Tensors; python scalars adopt the other side's dtype."""
    if isinstance(a, Tensor) and isinstance(b, Tensor):
        return a, b
    if isinstance(a, Tensor):
        return a, Tensor(np.asarray(b, dtype=a.data.dtype))
    if isinstance(b, Tensor):
        return Tensor(np.asarray(a, dtype=b.data.dtype)), b
    return Tensor(a), Tensor(b)


def _track(*tensors: Tensor) -> bool:
    return _GRAD_ENABLED and any(t.requires_grad for t in tensors)


def _accum(t: Tensor, g: np.ndarray) -> None:
    if not t.requires_grad:
        return
    if g.dtype != t.data.dtype:
        g = g.astype(t.data.dtype)
    t.grad = g if t.grad is None else t.grad + g


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum a broadcast gradient back down to the operand's shape."""
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for i, s in enumerate(shape):
        if s == 1 and g.shape[i] != 1:
            g = g.sum(axis=i, keepdims=True)
    return g.reshape(shape)


# -- elementwise primitives ---------------------------------------------------


def add(a, b) -> Tensor:
    a, b = _coerce_pair(a, b)
    out = Tensor(a.data + b.data, requires_grad=_track(a, b))
    if out.requires_grad:
        def _bw(g):
            _accum(a, _unbroadcast(g, a.shape))
            _accum(b, _unbroadcast(g, b.shape))
        out._parents, out._bw = (a, b), _bw
    return out


def sub(a, b) -> Tensor:
    a, b = _coerce_pair(a, b)
    out = Tensor(a.data - b.data, requires_grad=_track(a, b))
    if out.requires_grad:
        def _bw(g):
            _accum(a, _unbroadcast(g, a.shape))
            _accum(b, _unbroadcast(-g, b.shape))
        out._parents, out._bw = (a, b), _bw
    return out


def mul(a, b) -> Tensor:
    a, b = _coerce_pair(a, b)
    out = Tensor(a.data * b.data, requires_grad=_track(a, b))
    if out.requires_grad:
        def _bw(g):
            _accum(a, _unbroadcast(g * b.data, a.shape))
            _accum(b, _unbroadcast(g * a.data, b.shape))
        out._parents, out._bw = (a, b), _bw
    return out


def div(a, b) -> Tensor:
    a, b = _coerce_pair(a, b)
    with np.errstate(divide="ignore", invalid="ignore"):
        quotient = a.data / b.data
    out = Tensor(quotient, requires_grad=_track(a, b))
    if out.requires_grad:
        def _bw(g):
            _accum(a, _unbroadcast(g / b.data, a.shape))
            _accum(b, _unbroadcast(-g * a.data / (b.data * b.data), b.shape))
        out._parents, out._bw = (a, b), _bw
    return out


def neg(a: Tensor) -> Tensor:
    out = Tensor(-a.data, requires_grad=_track(a))
    if out.requires_grad:
        out._parents, out._bw = (a,), lambda g: _accum(a, -g)
    return out


def texp(a: Tensor) -> Tensor:
    with np.errstate(over="ignore"):
        e = np.exp(a.data)
    out = Tensor(e, requires_grad=_track(a))
    if out.requires_grad:
        out._parents, out._bw = (a,), lambda g: _accum(a, g * out.data)
    return out


def tsin(a: Tensor) -> Tensor:
    out = Tensor(np.sin(a.data), requires_grad=_track(a))
    if out.requires_grad:
        out._parents, out._bw = (a,), lambda g: _accum(a, g * np.cos(a.data))
    return out


def tsqrt(a: Tensor) -> Tensor:
    out = Tensor(np.sqrt(a.data), requires_grad=_track(a))
    if out.requires_grad:
        out._parents, out._bw = (a,), lambda g: _accum(a, g * (0.5 / out.data))
    return out


def relu(a: Tensor) -> Tensor:
    out = Tensor(np.maximum(a.data, 0), requires_grad=_track(a))
    if out.requires_grad:
        mask = a.data > 0
        out._parents, out._bw = (a,), lambda g: _accum(a, g * mask)
    return out


def sigmoid(a: Tensor) -> Tensor:
    # numerically stable split by sign; exp never sees a large positive arg
    x = a.data
    y = np.empty_like(x)
    pos = x >= 0
    y[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    y[~pos] = ex / (1.0 + ex)
    out = Tensor(y, requires_grad=_track(a))
    if out.requires_grad:
        out._parents, out._bw = (a,), lambda g: _accum(a, g * out.data * (1.0 - out.data))
    return out


# -- shape and reduction primitives -------------------------------------------


def reshape(a: Tensor, shape) -> Tensor:
    out = Tensor(a.data.reshape(shape), requires_grad=_track(a))
    if out.requires_grad:
        out._parents, out._bw = (a,), lambda g: _accum(a, g.reshape(a.shape))
    return out


def transpose(a: Tensor, axes=None) -> Tensor:
    out = Tensor(a.data.transpose(axes), requires_grad=_track(a))
    if out.requires_grad:
        inv = None if axes is None else tuple(np.argsort(axes))
        out._parents, out._bw = (a,), lambda g: _accum(a, g.transpose(inv))
    return out


def broadcast_to(a: Tensor, shape) -> Tensor:
    out = Tensor(np.broadcast_to(a.data, shape).copy(), requires_grad=_track(a))
    if out.requires_grad:
        out._parents, out._bw = (a,), lambda g: _accum(a, _unbroadcast(g, a.shape))
    return out


def concat(parts: Sequence[Tensor], axis: int = 0) -> Tensor:
    parts = list(parts)
    out = Tensor(np.concatenate([p.data for p in parts], axis=axis),
                 requires_grad=_track(*parts))
    if out.requires_grad:
        sizes = [p.shape[axis] for p in parts]
        splits = np.cumsum(sizes)[:-1]
        def _bw(g):
            for p, piece in zip(parts, np.split(g, splits, axis=axis)):
                _accum(p, piece)
        out._parents, out._bw = tuple(parts), _bw
    return out


def take(a: Tensor, key) -> Tensor:
    """Basic int/slice indexing with scatter-add backward."""
    out = Tensor(a.data[key], requires_grad=_track(a))
    if out.requires_grad:
        def _bw(g):
            # basic indexing only (ints/slices), so positions never repeat
            gx = np.zeros_like(a.data)
            gx[key] += g
            _accum(a, gx)
        out._parents, out._bw = (a,), _bw
    return out


def tsum(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    out = Tensor(a.data.sum(axis=axis, keepdims=keepdims), requires_grad=_track(a))
    if out.requires_grad:
        def _bw(g):
            if axis is None:
                _accum(a, np.broadcast_to(g, a.shape).copy())
            else:
                if not keepdims:
                    g = np.expand_dims(g, axis)
                _accum(a, np.broadcast_to(g, a.shape).copy())
        out._parents, out._bw = (a,), _bw
    return out


def tmean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    n = a.data.size if axis is None else a.shape[axis]
    return mul(tsum(a, axis=axis, keepdims=keepdims), 1.0 / n)


def _extreme(a: Tensor, axis, keepdims, fn, argfn) -> Tensor:
    out_data = fn(a.data, axis=axis, keepdims=keepdims)
    out = Tensor(out_data, requires_grad=_track(a))
    if out.requires_grad:
        def _bw(g):
            gx = np.zeros_like(a.data)
            if axis is None:
                idx = np.unravel_index(argfn(a.data), a.shape)
                gx[idx] = g.reshape(())
            else:
                # ties route to the first index along the axis, deterministically
                ax = axis % a.data.ndim
                sel = argfn(a.data, axis=ax)
                vals = g if not keepdims else np.squeeze(g, axis=ax)
                grid = np.meshgrid(*[np.arange(s) for s in sel.shape], indexing="ij")
                key, k = [], 0
                for d in range(a.data.ndim):
                    if d == ax:
                        key.append(sel)
                    else:
                        key.append(grid[k])
                        k += 1
                np.add.at(gx, tuple(key), vals)
            _accum(a, gx)
        out._parents, out._bw = (a,), _bw
    return out


def tmax(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    return _extreme(a, axis, keepdims, np.max, np.argmax)


def tmin(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    return _extreme(a, axis, keepdims, np.min, np.argmin)


# -- linear algebra ------------------------------------------------------------


def matmul(a: Tensor, b: Tensor, order_invariant: bool = False) -> Tensor:
    """2-D matrix product.

    order_invariant sorts the products along the contraction axis before
    summing, so the forward value is bitwise independent of row order in
    ``b`` (used where token-permutation invariance is asserted exactly).
    Only sensible for small contractions; backward is the standard one.
    """
    a, b = _coerce_pair(a, b)
    if a.ndim != 2 or b.ndim != 2:
        raise DimensionError(f"matmul needs 2-D operands, got {a.shape} @ {b.shape}")
    if a.shape[1] != b.shape[0]:
        raise DimensionError(f"matmul inner dims differ: {a.shape} @ {b.shape}")
    if order_invariant:
        prods = a.data[:, :, None] * b.data[None, :, :]
        prods.sort(axis=1, kind="stable")
        out_data = prods.sum(axis=1)
    else:
        out_data = a.data @ b.data
    out = Tensor(out_data, requires_grad=_track(a, b))
    if out.requires_grad:
        def _bw(g):
            _accum(a, g @ b.data.T)
            _accum(b, a.data.T @ g)
        out._parents, out._bw = (a, b), _bw
    return out


def pinv2(p, lam: float = 0.0) -> Tensor:
    """Regularized left pseudoinverse of a c x 2 matrix: (PtP + lam I)^-1 Pt.

    Computed in float64 regardless of input dtype, returned in the input
    dtype as a constant (no backward; callers feed detached prototypes).
    Logs a warning when the regularized PtP condition number exceeds 1e8.
    """
    arr = p.data if isinstance(p, Tensor) else np.asarray(p)
    if arr.ndim != 2 or arr.shape[1] != 2:
        raise DimensionError(f"pinv2 expects a (c, 2) matrix, got {arr.shape}")
    out_dtype = arr.dtype if arr.dtype in (np.dtype(np.float32), np.dtype(np.float64)) else _DEFAULT_DTYPE
    w = arr.astype(np.float64)
    ptp = w.T @ w
    a = ptp[0, 0] + lam
    b = ptp[0, 1]
    d = ptp[1, 1] + lam
    det = a * d - b * b
    half = 0.5 * (a + d)
    disc = np.sqrt(max(0.25 * (a - d) ** 2 + b * b, 0.0))
    lmax, lmin = half + disc, half - disc
    if not np.isfinite(det) or det <= 0 or lmin <= 0:
        raise ContractError("pinv2: PtP + lam I is not positive definite")
    if lmax / lmin > 1e8:
        logger.warning("pinv2: condition number %.3e exceeds 1e8", lmax / lmin)
    inv = np.array([[d, -b], [-b, a]], dtype=np.float64) / det
    return Tensor((inv @ w.T).astype(out_dtype), requires_grad=False)


# -- softmax / layer_norm -------------------------------------------------------


def softmax(a: Tensor, axis: int = -1, order_invariant: bool = False) -> Tensor:
    x = a.data
    m = x.max(axis=axis, keepdims=True)
    e = np.exp(x - m)
    if order_invariant:
        denom = np.sort(e, axis=axis).sum(axis=axis, keepdims=True)
    else:
        denom = e.sum(axis=axis, keepdims=True)
    y = e / denom
    out = Tensor(y, requires_grad=_track(a))
    if out.requires_grad:
        def _bw(g):
            dot = (g * out.data).sum(axis=axis, keepdims=True)
            _accum(a, out.data * (g - dot))
        out._parents, out._bw = (a,), _bw
    return out


def layer_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalize over the last axis, then scale and shift.

    A constant vector normalizes to zeros, so the output there is beta.
    """
    mu = tmean(x, axis=-1, keepdims=True)
    xc = sub(x, mu)
    var = tmean(mul(xc, xc), axis=-1, keepdims=True)
    y = div(xc, tsqrt(add(var, eps)))
    return add(mul(y, gamma), beta)


# -- spatial ops ---------------------------------------------------------------


def conv1x1(x: Tensor, w: Tensor, b: Tensor | None = None) -> Tensor:
    """Pointwise convolution: (ci,h,w) with weight (co,ci) and optional bias (co,)."""
    if x.ndim != 3 or w.ndim != 2:
        raise DimensionError(f"conv1x1 expects (c,h,w) and (co,ci), got {x.shape}, {w.shape}")
    ci, h, wdt = x.shape
    if w.shape[1] != ci:
        raise DimensionError(f"conv1x1 channel mismatch: input {ci}, weight {w.shape}")
    y = matmul(w, reshape(x, (ci, h * wdt)))
    if b is not None:
        if b.shape != (w.shape[0],):
            raise DimensionError(f"conv1x1 bias shape {b.shape} != ({w.shape[0]},)")
        y = add(y, reshape(b, (w.shape[0], 1)))
    return reshape(y, (w.shape[0], h, wdt))


def cosine_map(a: Tensor, b: Tensor, eps: float = COSINE_EPS) -> Tensor:
    """Cosine similarity of vector ``a`` (c,) against every location of ``b`` (c,h,w).

    Denominator is |a||b| + eps, so a zero vector scores 0 everywhere.
    """
    if a.ndim != 1 or b.ndim != 3 or a.shape[0] != b.shape[0]:
        raise DimensionError(f"cosine_map expects (c,) and (c,h,w), got {a.shape}, {b.shape}")
    c, h, w = b.shape
    bf = reshape(b, (c, h * w))
    dots = matmul(reshape(a, (1, c)), bf)
    na = tsqrt(add(tsum(mul(a, a)), NORM_TINY))
    nb = tsqrt(add(tsum(mul(bf, bf), axis=0, keepdims=True), NORM_TINY))
    return reshape(div(dots, add(mul(na, nb), eps)), (h, w))


def bilinear_resize(x: Tensor, size: tuple[int, int]) -> Tensor:
    """Corner-aligned bilinear resampling of (h,w) or (c,h,w) to (h',w').

    Same-size resize returns the input unchanged.
    """
    oh, ow = int(size[0]), int(size[1])
    if oh <= 0 or ow <= 0:
        raise DimensionError(f"bilinear_resize target must be positive, got {size}")
    if x.ndim == 2:
        return reshape(bilinear_resize(reshape(x, (1,) + x.shape), size), (oh, ow))
    if x.ndim != 3:
        raise DimensionError(f"bilinear_resize expects (h,w) or (c,h,w), got {x.shape}")
    c, h, w = x.shape
    if (h, w) == (oh, ow):
        return x
    ys = np.arange(oh) * ((h - 1) / (oh - 1) if oh > 1 else 0.0)
    xs = np.arange(ow) * ((w - 1) / (ow - 1) if ow > 1 else 0.0)
    y0 = np.floor(ys).astype(np.intp)
    x0 = np.floor(xs).astype(np.intp)
    y1 = np.minimum(y0 + 1, h - 1)
    x1 = np.minimum(x0 + 1, w - 1)
    wy = (ys - y0).astype(x.data.dtype)
    wx = (xs - x0).astype(x.data.dtype)
    wy2 = wy[:, None]
    wx2 = wx[None, :]
    d = x.data
    out_data = ((1 - wy2) * (1 - wx2) * d[:, y0[:, None], x0[None, :]]
                + (1 - wy2) * wx2 * d[:, y0[:, None], x1[None, :]]
                + wy2 * (1 - wx2) * d[:, y1[:, None], x0[None, :]]
                + wy2 * wx2 * d[:, y1[:, None], x1[None, :]])
    out = Tensor(out_data, requires_grad=_track(x))
    if out.requires_grad:
        corners = ((y0, x0, (1 - wy2) * (1 - wx2)), (y0, x1, (1 - wy2) * wx2),
                   (y1, x0, wy2 * (1 - wx2)), (y1, x1, wy2 * wx2))
        def _bw(g):
            gx = np.zeros_like(x.data)
            for yy, xx, wgt in corners:
                np.add.at(gx, (slice(None), yy[:, None], xx[None, :]), g * wgt)
            _accum(x, gx)
        out._parents, out._bw = (x,), _bw
    return out


def adaptive_avg_pool(x: Tensor, size: tuple[int, int]) -> Tensor:
    """Average (c,h,w) into (c,oh,ow) bins; bin i spans [floor(i*h/oh), ceil((i+1)*h/oh))."""
    if x.ndim != 3:
        raise DimensionError(f"adaptive_avg_pool expects (c,h,w), got {x.shape}")
    c, h, w = x.shape
    oh, ow = int(size[0]), int(size[1])
    if oh <= 0 or ow <= 0:
        raise DimensionError(f"adaptive_avg_pool target must be positive, got {size}")
    if h % oh == 0 and w % ow == 0:
        bh, bw = h // oh, w // ow
        out_data = x.data.reshape(c, oh, bh, ow, bw).mean(axis=(2, 4))
        out = Tensor(out_data, requires_grad=_track(x))
        if out.requires_grad:
            def _bw(g):
                gx = np.repeat(np.repeat(g, bh, axis=1), bw, axis=2) / (bh * bw)
                _accum(x, gx.astype(x.data.dtype))
            out._parents, out._bw = (x,), _bw
        return out
    ylo = [int(np.floor(i * h / oh)) for i in range(oh)]
    yhi = [int(np.ceil((i + 1) * h / oh)) for i in range(oh)]
    xlo = [int(np.floor(j * w / ow)) for j in range(ow)]
    xhi = [int(np.ceil((j + 1) * w / ow)) for j in range(ow)]
    out_data = np.empty((c, oh, ow), dtype=x.data.dtype)
    for i in range(oh):
        for j in range(ow):
            out_data[:, i, j] = x.data[:, ylo[i]:yhi[i], xlo[j]:xhi[j]].mean(axis=(1, 2))
    out = Tensor(out_data, requires_grad=_track(x))
    if out.requires_grad:
        def _bw(g):
            gx = np.zeros_like(x.data)
            for i in range(oh):
                for j in range(ow):
                    n = (yhi[i] - ylo[i]) * (xhi[j] - xlo[j])
                    gx[:, ylo[i]:yhi[i], xlo[j]:xhi[j]] += g[:, i:i + 1, j:j + 1] / n
            _accum(x, gx)
        out._parents, out._bw = (x,), _bw
    return out


# -- parameters and Adam --------------------------------------------------------


class Parameter:
    """Named trainable leaf plus its Adam state (first/second moments, step count)."""

    __slots__ = ("name", "tensor", "m", "v", "step")

    def __init__(self, name: str, data, dtype=None):
        self.name = name
        if isinstance(data, Tensor):
            data = data.data
        self.tensor = Tensor(np.array(data, dtype=dtype or _DEFAULT_DTYPE), requires_grad=True)
        self.m = np.zeros_like(self.tensor.data)
        self.v = np.zeros_like(self.tensor.data)
        self.step = 0

    @property
    def data(self):
        return self.tensor.data

    @property
    def grad(self):
        return self.tensor.grad

    def zero_grad(self):
        self.tensor.grad = None

    def __repr__(self):
        return f"Parameter({self.name}, shape={self.tensor.shape})"


def adam_step(params: Iterable[Parameter], lr: float = 1e-3,
              beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8) -> None:
    """One Adam update over named parameters; grads are consumed and cleared.

    A missing grad is a contract error. A zero grad leaves the parameter
    bit-identical (fresh moments stay zero, so the update is exactly zero).
    """
    for p in params:
        if p.tensor.grad is None:
            raise ContractError(f"adam_step: parameter {p.name} has no gradient")
        g = p.tensor.grad
        if g.shape != p.tensor.data.shape:
            raise DimensionError(f"adam_step: grad shape {g.shape} != param {p.tensor.shape}")
        p.step += 1
        p.m = beta1 * p.m + (1.0 - beta1) * g
        p.v = beta2 * p.v + (1.0 - beta2) * (g * g)
        mhat = p.m / (1.0 - beta1 ** p.step)
        vhat = p.v / (1.0 - beta2 ** p.step)
        p.tensor.data = p.tensor.data - lr * mhat / (np.sqrt(vhat) + eps)
        p.tensor.grad = None


# -- constructors ---------------------------------------------------------------


def zeros(shape, dtype=None) -> Tensor:
    return Tensor(np.zeros(shape, dtype=dtype or _DEFAULT_DTYPE))

def ones(shape, dtype=None) -> Tensor:
    return Tensor(np.ones(shape, dtype=dtype or _DEFAULT_DTYPE))

def full(shape, value, dtype=None) -> Tensor:
    return Tensor(np.full(shape, value, dtype=dtype or _DEFAULT_DTYPE))

def randn(shape, rng: np.random.Generator, std: float = 1.0, dtype=None) -> Tensor:
    return Tensor((rng.standard_normal(shape) * std).astype(dtype or _DEFAULT_DTYPE))
