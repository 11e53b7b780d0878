"""Reverse-mode automatic differentiation over dense numpy arrays.

The tape is implicit: every differentiable op links its output to its
inputs through a backward closure, and ``backward`` replays the closures
in reverse topological order.  Ops accept plain numpy arrays or python
scalars anywhere a constant is fine; only ``Tensor`` inputs participate
in differentiation.

Training runs in float32.  Gradient checking switches the whole stack to
float64 with ``using_dtype(np.float64)``.
"""

from __future__ import annotations

import contextlib
import math
from typing import Iterable, Sequence

import numpy as np

__all__ = [
    "Tensor",
    "AutodiffError",
    "GradientNaNError",
    "default_dtype",
    "set_default_dtype",
    "using_dtype",
    "no_grad",
    "add",
    "sub",
    "mul",
    "matmul",
    "affine",
    "relu",
    "reshape",
    "transpose",
    "index_axis",
    "concat",
    "stack",
    "gather_rows",
    "tensor_sum",
    "tensor_mean",
    "softmax",
    "log_softmax",
    "softmax_cross_entropy",
    "bce_with_logits",
    "layer_norm",
    "bilinear_sample",
    "backward",
    "grad",
]

_DEFAULT_DTYPE = np.float32
_GRAD_ENABLED = True


class AutodiffError(RuntimeError):
    """Tape misuse: non-scalar backward root, bad shapes, bad arguments."""


class GradientNaNError(AutodiffError):
    """A backward pass produced NaN gradients."""


def default_dtype():
    return _DEFAULT_DTYPE


def set_default_dtype(dtype) -> None:
    global _DEFAULT_DTYPE
    dtype = np.dtype(dtype)
    if dtype not in (np.dtype(np.float32), np.dtype(np.float64)):
        raise AutodiffError(f"unsupported default dtype {dtype}")
    _DEFAULT_DTYPE = dtype.type


@contextlib.contextmanager
def using_dtype(dtype):
    """Temporarily switch the default floating dtype (f32 or f64)."""
    global _DEFAULT_DTYPE
    prior = _DEFAULT_DTYPE
    set_default_dtype(dtype)
    try:
        yield
    finally:
        _DEFAULT_DTYPE = prior


@contextlib.contextmanager
def no_grad():
    """Disable taping inside the block; outputs are constants."""
    global _GRAD_ENABLED
    prior = _GRAD_ENABLED
    _GRAD_ENABLED = False
    try:
        yield
    finally:
        _GRAD_ENABLED = prior


class Tensor:
    """A numpy array plus an optional gradient buffer and tape linkage.

    ``grad`` stays ``None`` until a backward pass reaches the tensor.
    Tensors hash by identity, so they can key optimizer state dicts.
    """

    __slots__ = ("data", "grad", "requires_grad", "_backward", "_prev")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        self.data = np.asarray(data, dtype=dtype or _DEFAULT_DTYPE)
        self.grad = None
        self.requires_grad = bool(requires_grad) and _GRAD_ENABLED
        self._backward = None
        self._prev = ()

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    def item(self) -> float:
        return float(self.data)

    def numpy(self) -> np.ndarray:
        return self.data

    def detach(self) -> "Tensor":
        return Tensor(self.data.copy())

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.data.shape}{flag})"

    def __len__(self) -> int:
        return len(self.data)

    # Arithmetic sugar.  Constants (arrays, scalars) are allowed on either side.
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

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def reshape(self, *shape):
        return reshape(self, shape[0] if len(shape) == 1 and isinstance(shape[0], (tuple, list)) else shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes or None)

    def sum(self, axis=None, keepdims=False):
        return tensor_sum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        return tensor_mean(self, axis=axis, keepdims=keepdims)

    def relu(self):
        return relu(self)

    def backward(self):
        backward(self)


def _is_tensor(x) -> bool:
    return isinstance(x, Tensor)


def _const(x) -> np.ndarray:
    if isinstance(x, np.ndarray):
        return x
    return np.asarray(x, dtype=_DEFAULT_DTYPE)


def _out(data: np.ndarray, parents: Sequence[Tensor], make_backward) -> Tensor:
    """Build an op output.  ``make_backward`` is called only when taping."""
    t = Tensor.__new__(Tensor)
    t.data = data
    t.grad = None
    live = _GRAD_ENABLED and any(p.requires_grad for p in parents)
    t.requires_grad = live
    if live:
        t._prev = tuple(p for p in parents if p.requires_grad)
        t._backward = make_backward(t)
    else:
        t._prev = ()
        t._backward = None
    return t


def _accum(t: Tensor, g: np.ndarray) -> None:
    # Non-inplace add: backward closures may hand out views.
    t.grad = g if t.grad is None else t.grad + g


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum ``g`` down to ``shape`` along axes numpy broadcasting expanded."""
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    squeeze = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    if squeeze:
        g = g.sum(axis=squeeze, keepdims=True)
    return g


def add(a, b) -> Tensor:
    ta, tb = _is_tensor(a), _is_tensor(b)
    if not (ta or tb):
        raise AutodiffError("add needs at least one Tensor input")
    da = a.data if ta else _const(a)
    db = b.data if tb else _const(b)
    out_data = da + db

    def make_backward(out):
        def run():
            g = out.grad
            if ta and a.requires_grad:
                _accum(a, _unbroadcast(g, da.shape))
            if tb and b.requires_grad:
                _accum(b, _unbroadcast(g, db.shape))

        return run

    return _out(out_data, [x for x in (a, b) if _is_tensor(x)], make_backward)


def sub(a, b) -> Tensor:
    ta, tb = _is_tensor(a), _is_tensor(b)
    if not (ta or tb):
        raise AutodiffError("sub needs at least one Tensor input")
    da = a.data if ta else _const(a)
    db = b.data if tb else _const(b)
    out_data = da - db

    def make_backward(out):
        def run():
            g = out.grad
            if ta and a.requires_grad:
                _accum(a, _unbroadcast(g, da.shape))
            if tb and b.requires_grad:
                _accum(b, _unbroadcast(-g, db.shape))

        return run

    return _out(out_data, [x for x in (a, b) if _is_tensor(x)], make_backward)


def mul(a, b) -> Tensor:
    ta, tb = _is_tensor(a), _is_tensor(b)
    if not (ta or tb):
        raise AutodiffError("mul needs at least one Tensor input")
    da = a.data if ta else _const(a)
    db = b.data if tb else _const(b)
    out_data = da * db

    def make_backward(out):
        def run():
            g = out.grad
            if ta and a.requires_grad:
                _accum(a, _unbroadcast(g * db, da.shape))
            if tb and b.requires_grad:
                _accum(b, _unbroadcast(g * da, db.shape))

        return run

    return _out(out_data, [x for x in (a, b) if _is_tensor(x)], make_backward)


def matmul(a, b) -> Tensor:
    """Matrix product with numpy semantics on the leading (batch) dims."""
    ta, tb = _is_tensor(a), _is_tensor(b)
    da = a.data if ta else _const(a)
    db = b.data if tb else _const(b)
    if da.ndim < 2 or db.ndim < 2:
        raise AutodiffError("matmul operands must be at least 2-D")
    out_data = da @ db

    def make_backward(out):
        def run():
            g = out.grad
            if ta and a.requires_grad:
                ga = g @ db.swapaxes(-1, -2)
                _accum(a, _unbroadcast(ga, da.shape))
            if tb and b.requires_grad:
                gb = da.swapaxes(-1, -2) @ g
                _accum(b, _unbroadcast(gb, db.shape))

        return run

    return _out(out_data, [x for x in (a, b) if _is_tensor(x)], make_backward)


def affine(x: Tensor, w: Tensor, b: Tensor) -> Tensor:
    """Fused ``x @ w + b`` for 2-D ``x``; one tape node instead of two."""
    if x.data.ndim != 2:
        raise AutodiffError("affine expects a 2-D input")
    out_data = x.data @ w.data + b.data

    def make_backward(out):
        def run():
            g = out.grad
            if x.requires_grad:
                _accum(x, g @ w.data.T)
            if w.requires_grad:
                _accum(w, x.data.T @ g)
            if b.requires_grad:
                _accum(b, g.sum(axis=0))

        return run

    return _out(out_data, [x, w, b], make_backward)


def relu(x: Tensor) -> Tensor:
    out_data = np.maximum(x.data, 0.0)

    def make_backward(out):
        def run():
            if x.requires_grad:
                _accum(x, out.grad * (x.data > 0))

        return run

    return _out(out_data, [x], make_backward)


def reshape(x: Tensor, shape) -> Tensor:
    out_data = x.data.reshape(shape)

    def make_backward(out):
        def run():
            if x.requires_grad:
                _accum(x, out.grad.reshape(x.data.shape))

        return run

    return _out(out_data, [x], make_backward)


def transpose(x: Tensor, axes=None) -> Tensor:
    out_data = x.data.transpose(axes) if axes is not None else x.data.T
    if axes is not None:
        inverse = tuple(np.argsort(axes))
    else:
        inverse = None

    def make_backward(out):
        def run():
            if x.requires_grad:
                g = out.grad.transpose(inverse) if inverse is not None else out.grad.T
                _accum(x, g)

        return run

    return _out(out_data, [x], make_backward)


def index_axis(x: Tensor, index: int, axis: int) -> Tensor:
    """Select one slice along ``axis``, dropping that axis."""
    out_data = np.take(x.data, index, axis=axis)

    def make_backward(out):
        def run():
            if x.requires_grad:
                g = np.zeros_like(x.data)
                sel = [slice(None)] * x.data.ndim
                sel[axis] = index
                g[tuple(sel)] = out.grad
                _accum(x, g)

        return run

    return _out(out_data, [x], make_backward)


def concat(parts: Sequence[Tensor], axis: int = 0) -> Tensor:
    parts = list(parts)
    if not parts:
        raise AutodiffError("concat needs at least one input")
    out_data = np.concatenate([p.data for p in parts], axis=axis)
    sizes = [p.data.shape[axis] for p in parts]
    offsets = np.cumsum([0] + sizes)

    def make_backward(out):
        def run():
            g = out.grad
            for p, lo, hi in zip(parts, offsets[:-1], offsets[1:]):
                if p.requires_grad:
                    sel = [slice(None)] * g.ndim
                    sel[axis] = slice(lo, hi)
                    _accum(p, g[tuple(sel)])

        return run

    return _out(out_data, parts, make_backward)


def stack(parts: Sequence[Tensor], axis: int = 0) -> Tensor:
    parts = list(parts)
    if not parts:
        raise AutodiffError("stack needs at least one input")
    out_data = np.stack([p.data for p in parts], axis=axis)

    def make_backward(out):
        def run():
            g = out.grad
            for i, p in enumerate(parts):
                if p.requires_grad:
                    _accum(p, np.take(g, i, axis=axis))

        return run

    return _out(out_data, parts, make_backward)


def gather_rows(x: Tensor, indices) -> Tensor:
    """Row lookup ``x[indices]``; backward scatter-adds into duplicates."""
    idx = np.asarray(indices, dtype=np.int64)
    out_data = x.data[idx]

    def make_backward(out):
        def run():
            if x.requires_grad:
                g = np.zeros_like(x.data)
                np.add.at(g, idx, out.grad)
                _accum(x, g)

        return run

    return _out(out_data, [x], make_backward)


def tensor_sum(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    out_data = x.data.sum(axis=axis, keepdims=keepdims)

    def make_backward(out):
        def run():
            if not x.requires_grad:
                return
            g = out.grad
            if axis is not None and not keepdims:
                axes = (axis,) if isinstance(axis, int) else tuple(axis)
                axes = tuple(a % x.data.ndim for a in axes)
                g = np.expand_dims(g, axes)
            _accum(x, np.broadcast_to(g, x.data.shape).copy())

        return run

    return _out(out_data, [x], make_backward)


def tensor_mean(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    out_data = x.data.mean(axis=axis, keepdims=keepdims)
    count = x.data.size if axis is None else int(
        np.prod([x.data.shape[a % x.data.ndim] for a in ((axis,) if isinstance(axis, int) else tuple(axis))])
    )

    def make_backward(out):
        def run():
            if not x.requires_grad:
                return
            g = out.grad
            if axis is not None and not keepdims:
                axes = (axis,) if isinstance(axis, int) else tuple(axis)
                axes = tuple(a % x.data.ndim for a in axes)
                g = np.expand_dims(g, axes)
            _accum(x, np.broadcast_to(g / count, x.data.shape).copy())

        return run

    return _out(out_data, [x], make_backward)


def softmax(x: Tensor, axis: int = -1, mask: np.ndarray | None = None) -> Tensor:
    """Softmax with an optional additive {0, -inf} mask.

    Masked positions come out exactly 0 and receive exactly zero gradient.
    A fully masked row produces an all-zero row rather than NaN.
    """
    z = x.data if mask is None else x.data + mask
    zmax = z.max(axis=axis, keepdims=True)
    zmax = np.where(np.isfinite(zmax), zmax, 0.0)
    e = np.exp(z - zmax)
    denom = e.sum(axis=axis, keepdims=True)
    out_data = e / np.where(denom == 0.0, 1.0, denom)

    def make_backward(out):
        def run():
            if x.requires_grad:
                g = out.grad
                s = out_data
                dot = (g * s).sum(axis=axis, keepdims=True)
                _accum(x, (g - dot) * s)

        return run

    return _out(out_data, [x], make_backward)


def log_softmax(x: Tensor, axis: int = -1) -> Tensor:
    z = x.data
    zmax = z.max(axis=axis, keepdims=True)
    zmax = np.where(np.isfinite(zmax), zmax, 0.0)
    shifted = z - zmax
    lse = np.log(np.exp(shifted).sum(axis=axis, keepdims=True))
    out_data = shifted - lse

    def make_backward(out):
        def run():
            if x.requires_grad:
                g = out.grad
                s = np.exp(out_data)
                _accum(x, g - s * g.sum(axis=axis, keepdims=True))

        return run

    return _out(out_data, [x], make_backward)


def softmax_cross_entropy(logits: Tensor, labels) -> Tensor:
    """Mean cross entropy of integer ``labels`` under row-wise softmax.

    Rows may contain -inf entries (structurally excluded classes); those
    entries get probability 0 and zero gradient.  Label positions must be
    finite.
    """
    y = np.asarray(labels, dtype=np.int64)
    z = logits.data
    if z.ndim != 2 or y.shape != (z.shape[0],):
        raise AutodiffError("softmax_cross_entropy expects [n, k] logits and [n] labels")
    n = z.shape[0]
    zmax = z.max(axis=1, keepdims=True)
    zmax = np.where(np.isfinite(zmax), zmax, 0.0)
    e = np.exp(z - zmax)
    denom = e.sum(axis=1, keepdims=True)
    logp = (z - zmax) - np.log(denom)
    picked = logp[np.arange(n), y]
    if np.isnan(z).any():
        raise GradientNaNError("cross entropy received NaN logits")
    if not np.all(np.isfinite(picked)):
        raise AutodiffError("cross entropy label sits on a -inf logit")
    out_data = np.asarray(-picked.mean(), dtype=z.dtype)

    def make_backward(out):
        def run():
            if logits.requires_grad:
                probs = e / denom
                probs[np.arange(n), y] -= 1.0
                _accum(logits, probs * (out.grad / n))

        return run

    return _out(out_data, [logits], make_backward)


def bce_with_logits(logits: Tensor, targets) -> Tensor:
    """Mean binary cross entropy against {0,1} targets, computed stably."""
    t = np.asarray(targets, dtype=logits.data.dtype)
    z = logits.data
    if z.shape != t.shape:
        raise AutodiffError("bce_with_logits shapes disagree")
    if z.size == 0:
        raise AutodiffError("bce_with_logits over an empty batch")
    # softplus(z) - z*t, with softplus(z) = max(z,0) + log1p(exp(-|z|))
    per = np.maximum(z, 0.0) - z * t + np.log1p(np.exp(-np.abs(z)))
    out_data = np.asarray(per.mean(), dtype=z.dtype)

    def make_backward(out):
        def run():
            if logits.requires_grad:
                sig = 1.0 / (1.0 + np.exp(-z))
                _accum(logits, (sig - t) * (out.grad / z.size))

        return run

    return _out(out_data, [logits], make_backward)


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalize the last axis to zero mean / unit variance, then scale-shift."""
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv

    out_data = xhat * gain.data + bias.data
    d = x.data.shape[-1]

    def make_backward(out):
        def run():
            g = out.grad
            if gain.requires_grad:
                red = tuple(range(g.ndim - 1))
                _accum(gain, (g * xhat).sum(axis=red))
            if bias.requires_grad:
                red = tuple(range(g.ndim - 1))
                _accum(bias, g.sum(axis=red))
            if x.requires_grad:
                gh = g * gain.data
                m1 = gh.mean(axis=-1, keepdims=True)
                m2 = (gh * xhat).mean(axis=-1, keepdims=True)
                _accum(x, inv * (gh - m1 - xhat * m2))

        return run

    return _out(out_data, [x, gain, bias], make_backward)


def _bilinear_corners(shape, pts: np.ndarray):
    """Shared corner bookkeeping for bilinear sampling on a [C,H,W] map."""
    _, H, W = shape
    x = pts[:, 0]
    y = pts[:, 1]
    x0 = np.floor(x)
    y0 = np.floor(y)
    fx = x - x0
    fy = y - y0
    x0i = x0.astype(np.int64)
    y0i = y0.astype(np.int64)
    corners = []
    for dy in (0, 1):
        for dx in (0, 1):
            xi = x0i + dx
            yi = y0i + dy
            valid = (xi >= 0) & (xi < W) & (yi >= 0) & (yi < H)
            xc = np.clip(xi, 0, W - 1)
            yc = np.clip(yi, 0, H - 1)
            wx = fx if dx else 1.0 - fx
            wy = fy if dy else 1.0 - fy
            corners.append((wx * wy, valid, yc, xc, dy, dx))
    return corners, fx, fy


def bilinear_sample(feature_map, points) -> Tensor:
    """Sample a [C,H,W] map at pixel coordinates ``points`` [..., 2] (x, y).

    Uses bilinear interpolation with zero padding outside the map.  Both
    the map and the points may be Tensors; gradients flow to whichever
    requires them.  Integer coordinates land exactly on pixels, so a point
    at (j, i) returns ``map[:, i, j]``.
    """
    tm, tp = _is_tensor(feature_map), _is_tensor(points)
    m = feature_map.data if tm else _const(feature_map)
    p = points.data if tp else _const(points)
    if m.ndim != 3:
        raise AutodiffError("bilinear_sample expects a [C,H,W] map")
    if p.shape[-1] != 2:
        raise AutodiffError("bilinear_sample expects [..., 2] points")
    C, H, W = m.shape
    lead = p.shape[:-1]
    flat = p.reshape(-1, 2)
    corners, fx, fy = _bilinear_corners(m.shape, flat)

    vals = []  # validity-masked corner values, each (C, N)
    acc = None
    for w, valid, yc, xc, _, _ in corners:
        v = m[:, yc, xc] * valid
        vals.append(v)
        term = v * w
        acc = term if acc is None else acc + term
    out_data = np.ascontiguousarray(acc.T).reshape(lead + (C,))

    def make_backward(out):
        def run():
            g = out.grad.reshape(-1, C)  # (N, C)
            if tp and points.requires_grad:
                v00, v01, v10, v11 = vals
                ddx = (1.0 - fy) * (v01 - v00) + fy * (v11 - v10)  # (C, N)
                ddy = (1.0 - fx) * (v10 - v00) + fx * (v11 - v01)
                gx = np.einsum("nc,cn->n", g, ddx)
                gy = np.einsum("nc,cn->n", g, ddy)
                gp = np.stack([gx, gy], axis=-1).reshape(p.shape)
                _accum(points, gp)
            if tm and feature_map.requires_grad:
                flat_acc = np.zeros(C * H * W, dtype=m.dtype)
                chan = np.arange(C, dtype=np.int64)[:, None] * (H * W)
                for w, valid, yc, xc, _, _ in corners:
                    lin = yc * W + xc
                    upd = g.T * (w * valid)  # (C, N)
                    idx = (chan + lin[None, :]).ravel()
                    flat_acc += np.bincount(idx, weights=upd.ravel(), minlength=C * H * W)
                _accum(feature_map, flat_acc.reshape(C, H, W).astype(m.dtype))

        return run

    parents = [x for x in (feature_map, points) if _is_tensor(x)]
    return _out(out_data, parents, make_backward)


def sample_levels(feature_map: np.ndarray, pts: np.ndarray) -> np.ndarray:
    """Constant-path bilinear sampling (no tape): [C,H,W], [...,2] -> [...,C]."""
    C, H, W = feature_map.shape
    lead = pts.shape[:-1]
    flat = pts.reshape(-1, 2)
    corners, _, _ = _bilinear_corners(feature_map.shape, flat)
    acc = None
    for w, valid, yc, xc, _, _ in corners:
        term = (feature_map[:, yc, xc] * valid) * w
        acc = term if acc is None else acc + term
    return np.ascontiguousarray(acc.T).reshape(lead + (C,))


def _toposort(root: Tensor) -> list[Tensor]:
    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, Iterable[Tensor]]] = [(root, iter(root._prev))]
    seen.add(id(root))
    while stack:
        node, it = stack[-1]
        advanced = False
        for child in it:
            if id(child) not in seen:
                seen.add(id(child))
                stack.append((child, iter(child._prev)))
                advanced = True
                break
        if not advanced:
            order.append(node)
            stack.pop()
    return order


def backward(root: Tensor) -> None:
    """Accumulate d(root)/d(node) into ``grad`` for every taped ancestor."""
    if root.data.shape != ():
        raise AutodiffError("backward root must be a scalar")
    if not root.requires_grad:
        raise AutodiffError("backward root does not require grad")
    order = _toposort(root)
    root.grad = np.ones((), dtype=root.data.dtype)
    for node in reversed(order):
        if node._backward is not None:
            node._backward()


def grad(loss: Tensor, params: Sequence[Tensor]) -> dict[Tensor, np.ndarray]:
    """Gradient of a scalar loss w.r.t. ``params``; NaN-checked.

    Unreached parameters get zero gradients (a parameter can sit out a
    forward pass, e.g. a head that saw no inputs this scene).
    """
    if not np.isfinite(loss.data):
        raise GradientNaNError("loss is not finite")
    params = list(params)
    for p in params:
        p.grad = None
    backward(loss)
    out: dict[Tensor, np.ndarray] = {}
    for p in params:
        g = p.grad if p.grad is not None else np.zeros_like(p.data)
        if np.isnan(g).any():
            raise GradientNaNError("NaN gradient encountered during backward")
        out[p] = g
    return out
