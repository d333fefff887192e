"""Dense tensors with tape-based reverse-mode autodiff.

Covers exactly what the detector needs: convolution, linear maps, activations,
softmax, pooling means, bilinear grid sampling, (batched) matmul for attention,
and the loss primitives. No general broadcasting, no views, no GPU. Gradients
accumulate in fixed reverse execution order so runs are bitwise reproducible.

Two numeric modes: standard (float32) for training/inference and high
precision (float64) for finite-difference verification, switched with
`precision("high")` or `set_default_dtype`.
"""

from __future__ import annotations

import contextlib
import math
from dataclasses import dataclass

import numpy as np

from .. import _kernels as K

_default_dtype = np.dtype(np.float32)
_TAPES: list["Tape"] = []


class ShapeError(ValueError):
    pass


def default_dtype():
    return _default_dtype


def set_default_dtype(dtype):
    global _default_dtype
    dt = np.dtype(dtype)
    if dt not in (np.dtype(np.float32), np.dtype(np.float64)):
        raise ValueError(f"unsupported dtype {dt}; use float32 or float64")
    _default_dtype = dt


@contextlib.contextmanager
def precision(mode):
    """Scoped numeric mode: 'standard' (float32) or 'high' (float64)."""
    if mode not in ("standard", "high"):
        raise ValueError(f"unknown precision mode {mode!r}")
    global _default_dtype
    prev = _default_dtype
    _default_dtype = np.dtype(np.float64 if mode == "high" else np.float32)
    try:
        yield
    finally:
        _default_dtype = prev


class Tensor:
    """Contiguous n-d float array with optional gradient storage."""

    __slots__ = ("data", "requires_grad", "grad")

    def __init__(self, data, requires_grad=False, dtype=None):
        if dtype is not None:
            arr = np.asarray(data, dtype=np.dtype(dtype))
        elif isinstance(data, np.ndarray) and data.dtype in (np.float32, np.float64):
            arr = np.asarray(data)
        else:
            arr = np.asarray(data, dtype=_default_dtype)
        if not arr.flags["C_CONTIGUOUS"]:
            arr = np.ascontiguousarray(arr)  # note: promotes 0-d, but 0-d is always contiguous
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad = None

    @classmethod
    def _wrap(cls, data, requires_grad):
        t = cls.__new__(cls)
        t.data = data
        t.requires_grad = requires_grad
        t.grad = None
        return t

    @property
    def shape(self):
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self):
        return self.data.size

    def item(self):
        return float(self.data.reshape(-1)[0])

    def numpy(self):
        return self.data

    def detach(self):
        return Tensor._wrap(self.data, False)

    def zero_grad(self):
        self.grad = None

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, dtype={self.data.dtype}, requires_grad={self.requires_grad})"

    def __add__(self, other):
        return add(self, other)

    def __mul__(self, other):
        if isinstance(other, Tensor):
            return mul(self, other)
        return mul_scalar(self, float(other))

    __rmul__ = __mul__

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def reshape(self, shape):
        return reshape(self, shape)

    def mean(self, axis=None):
        return mean(self, axis)

    def sum(self, axis=None):
        return sum_op(self, axis)


class Tape:
    """Ordered record of executed ops; backward replays it exactly once in reverse."""

    def __init__(self):
        self._entries = []
        self._consumed = False

    def __enter__(self):
        _TAPES.append(self)
        return self

    def __exit__(self, *exc):
        _TAPES.pop()
        return False

    def __len__(self):
        return len(self._entries)

    def backward(self, root: Tensor):
        if self._consumed:
            raise RuntimeError("tape already consumed by a previous backward()")
        if root.data.size != 1:
            raise ValueError(f"backward root must be scalar, got shape {root.data.shape}")
        self._consumed = True
        root.grad = np.ones_like(root.data)
        for fn in reversed(self._entries):
            fn()
        self.clear()

    def clear(self):
        """Release every recorded op and the intermediates it captured."""
        self._entries.clear()


def grad_enabled():
    return bool(_TAPES)


def _accum(t: Tensor, g):
    if t.requires_grad:
        t.grad = g if t.grad is None else t.grad + g


def _out(data, *inputs):
    rec = bool(_TAPES) and any(t.requires_grad for t in inputs)
    return Tensor._wrap(data, rec), rec


def _record(fn):
    _TAPES[-1]._entries.append(fn)


def _same_shape(a, b, op):
    if a.data.shape != b.data.shape:
        raise ShapeError(f"{op}: shape mismatch {a.data.shape} vs {b.data.shape}")


def _same_dtype(a, b, op):
    if a.data.dtype != b.data.dtype:
        raise ShapeError(f"{op}: dtype mismatch {a.data.dtype} vs {b.data.dtype}")


# ---------------------------------------------------------------- arithmetic


def add(a: Tensor, b: Tensor) -> Tensor:
    _same_shape(a, b, "add")
    _same_dtype(a, b, "add")
    out, rec = _out(a.data + b.data, a, b)
    if rec:
        def bwd():
            if out.grad is None:
                return
            _accum(a, out.grad)
            _accum(b, out.grad)
        _record(bwd)
    return out


def sub(a: Tensor, b: Tensor) -> Tensor:
    _same_shape(a, b, "sub")
    out, rec = _out(a.data - b.data, a, b)
    if rec:
        def bwd():
            if out.grad is None:
                return
            _accum(a, out.grad)
            _accum(b, -out.grad)
        _record(bwd)
    return out


def mul(a: Tensor, b: Tensor) -> Tensor:
    _same_shape(a, b, "mul")
    out, rec = _out(a.data * b.data, a, b)
    if rec:
        ad, bd = a.data, b.data
        def bwd():
            if out.grad is None:
                return
            _accum(a, out.grad * bd)
            _accum(b, out.grad * ad)
        _record(bwd)
    return out


def mul_scalar(a: Tensor, s: float) -> Tensor:
    out, rec = _out(a.data * a.data.dtype.type(s), a)
    if rec:
        def bwd():
            if out.grad is None:
                return
            _accum(a, out.grad * a.data.dtype.type(s))
        _record(bwd)
    return out


def neg(a: Tensor) -> Tensor:
    out, rec = _out(-a.data, a)
    if rec:
        def bwd():
            if out.grad is None:
                return
            _accum(a, -out.grad)
        _record(bwd)
    return out


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.data.ndim != 2 or b.data.ndim != 2 or a.data.shape[1] != b.data.shape[0]:
        raise ShapeError(f"matmul: incompatible shapes {a.data.shape} and {b.data.shape}")
    out, rec = _out(a.data @ b.data, a, b)
    if rec:
        ad, bd = a.data, b.data
        def bwd():
            if out.grad is None:
                return
            _accum(a, out.grad @ bd.T)
            _accum(b, ad.T @ out.grad)
        _record(bwd)
    return out


def bmm(a: Tensor, b: Tensor) -> Tensor:
    if a.data.ndim != 3 or b.data.ndim != 3 or a.data.shape[0] != b.data.shape[0] \
            or a.data.shape[2] != b.data.shape[1]:
        raise ShapeError(f"bmm: incompatible shapes {a.data.shape} and {b.data.shape}")
    out, rec = _out(a.data @ b.data, a, b)
    if rec:
        ad, bd = a.data, b.data
        def bwd():
            if out.grad is None:
                return
            _accum(a, out.grad @ bd.transpose(0, 2, 1))
            _accum(b, ad.transpose(0, 2, 1) @ out.grad)
        _record(bwd)
    return out


def linear(x: Tensor, w: Tensor, b: Tensor | None = None) -> Tensor:
    """x[N,K] @ w[M,K]^T + b[M]."""
    if x.data.ndim != 2 or w.data.ndim != 2 or x.data.shape[1] != w.data.shape[1]:
        raise ShapeError(f"linear: incompatible shapes x{x.data.shape} w{w.data.shape}")
    y = x.data @ w.data.T
    if b is not None:
        y = y + b.data
    inputs = (x, w) if b is None else (x, w, b)
    out, rec = _out(y, *inputs)
    if rec:
        xd, wd = x.data, w.data
        def bwd():
            if out.grad is None:
                return
            _accum(x, out.grad @ wd)
            _accum(w, out.grad.T @ xd)
            if b is not None:
                _accum(b, out.grad.sum(axis=0))
        _record(bwd)
    return out


# ---------------------------------------------------------------- activations


def relu(x: Tensor) -> Tensor:
    out, rec = _out(np.maximum(x.data, 0), x)
    if rec:
        mask = x.data > 0
        def bwd():
            if out.grad is None:
                return
            _accum(x, out.grad * mask)
        _record(bwd)
    return out


def sigmoid(x: Tensor) -> Tensor:
    xd = x.data
    y = np.where(xd >= 0, 1.0 / (1.0 + np.exp(-np.abs(xd))),
                 np.exp(-np.abs(xd)) / (1.0 + np.exp(-np.abs(xd)))).astype(xd.dtype)
    out, rec = _out(y, x)
    if rec:
        def bwd():
            if out.grad is None:
                return
            _accum(x, out.grad * y * (1.0 - y))
        _record(bwd)
    return out


def softmax(x: Tensor) -> Tensor:
    """Softmax over the last axis; rows sum to 1."""
    z = x.data - x.data.max(axis=-1, keepdims=True)
    e = np.exp(z)
    y = e / e.sum(axis=-1, keepdims=True)
    out, rec = _out(y, x)
    if rec:
        def bwd():
            if out.grad is None:
                return
            g = out.grad
            _accum(x, (g - (g * y).sum(axis=-1, keepdims=True)) * y)
        _record(bwd)
    return out


# ---------------------------------------------------------------- reductions


def sum_op(x: Tensor, axis=None) -> Tensor:
    out, rec = _out(np.asarray(x.data.sum(axis=axis)), x)
    if rec:
        shp = x.data.shape
        def bwd():
            if out.grad is None:
                return
            g = out.grad
            if axis is not None:
                g = np.expand_dims(g, axis)
            _accum(x, np.broadcast_to(g, shp).copy())
        _record(bwd)
    return out


def mean(x: Tensor, axis=None) -> Tensor:
    out, rec = _out(np.asarray(x.data.mean(axis=axis)), x)
    if rec:
        shp = x.data.shape
        n = x.data.size if axis is None else shp[axis]
        def bwd():
            if out.grad is None:
                return
            g = out.grad
            if axis is not None:
                g = np.expand_dims(g, axis)
            _accum(x, np.broadcast_to(g, shp) / n)
        _record(bwd)
    return out


def avg_pool(x: Tensor, axis: int) -> Tensor:
    """Average pooling along one axis (e.g. over RoI grid points)."""
    return mean(x, axis)


# ---------------------------------------------------------------- reshaping


def reshape(x: Tensor, shape) -> Tensor:
    out, rec = _out(np.ascontiguousarray(x.data.reshape(shape)), x)
    if rec:
        shp = x.data.shape
        def bwd():
            if out.grad is None:
                return
            _accum(x, out.grad.reshape(shp))
        _record(bwd)
    return out


def permute(x: Tensor, axes) -> Tensor:
    out, rec = _out(np.ascontiguousarray(x.data.transpose(axes)), x)
    if rec:
        inv = np.argsort(axes)
        def bwd():
            if out.grad is None:
                return
            _accum(x, np.ascontiguousarray(out.grad.transpose(inv)))
        _record(bwd)
    return out


def concat(tensors, axis=0) -> Tensor:
    tensors = list(tensors)
    out, rec = _out(np.concatenate([t.data for t in tensors], axis=axis), *tensors)
    if rec:
        sizes = [t.data.shape[axis] for t in tensors]
        def bwd():
            if out.grad is None:
                return
            start = 0
            for t, n in zip(tensors, sizes):
                sl = [slice(None)] * out.grad.ndim
                sl[axis] = slice(start, start + n)
                _accum(t, np.ascontiguousarray(out.grad[tuple(sl)]))
                start += n
        _record(bwd)
    return out


def stack(tensors, axis=0) -> Tensor:
    tensors = list(tensors)
    out, rec = _out(np.stack([t.data for t in tensors], axis=axis), *tensors)
    if rec:
        def bwd():
            if out.grad is None:
                return
            for i, t in enumerate(tensors):
                _accum(t, np.ascontiguousarray(np.take(out.grad, i, axis=axis)))
        _record(bwd)
    return out


def narrow(x: Tensor, start: int, length: int) -> Tensor:
    """Contiguous row slice [start, start+length) along axis 0."""
    out, rec = _out(np.ascontiguousarray(x.data[start:start + length]), x)
    if rec:
        shp = x.data.shape
        def bwd():
            if out.grad is None:
                return
            g = np.zeros(shp, dtype=out.grad.dtype)
            g[start:start + length] = out.grad
            _accum(x, g)
        _record(bwd)
    return out


def take(x: Tensor, indices) -> Tensor:
    """Gather rows along axis 0 (indices may repeat)."""
    idx = np.asarray(indices, dtype=np.int64)
    out, rec = _out(np.ascontiguousarray(x.data[idx]), x)
    if rec:
        shp = x.data.shape
        def bwd():
            if out.grad is None:
                return
            g = np.zeros(shp, dtype=out.grad.dtype)
            np.add.at(g, idx, out.grad)
            _accum(x, g)
        _record(bwd)
    return out


# ---------------------------------------------------------------- conv / sampling


def conv2d(x: Tensor, w: Tensor, b: Tensor | None = None, stride: int = 1, pad: int = 0) -> Tensor:
    """2-D convolution (cross-correlation) on x[Cin,H,W] with w[Cout,Cin,kh,kw].

    Output height is (H + 2*pad - kh) // stride + 1; kernel extents must be odd.
    """
    if x.data.ndim != 3 or w.data.ndim != 4:
        raise ShapeError(f"conv2d: expected x[C,H,W] and w[Co,Ci,kh,kw], got {x.data.shape} and {w.data.shape}")
    if x.data.shape[0] != w.data.shape[1]:
        raise ShapeError(f"conv2d: input channels {x.data.shape} do not match weight {w.data.shape}")
    kh, kw = w.data.shape[2], w.data.shape[3]
    if kh % 2 == 0 or kw % 2 == 0:
        raise ValueError(f"conv2d: kernel extents must be odd, got {kh}x{kw}")
    if pad < 0 or stride < 1:
        raise ValueError(f"conv2d: need pad >= 0 and stride >= 1, got pad={pad} stride={stride}")
    from .._kernels import conv_blas

    cols, ho, wo = conv_blas.im2col(x.data, kh, kw, stride, pad)
    y = conv_blas.forward_from_cols(cols, ho, wo, w.data, None if b is None else b.data)
    inputs = (x, w) if b is None else (x, w, b)
    out, rec = _out(y, *inputs)
    if rec:
        wd = w.data
        in_hw = (x.data.shape[1], x.data.shape[2])
        def bwd():
            if out.grad is None:
                return
            g = np.ascontiguousarray(out.grad)
            _accum(x, K.conv2d_backward_input(g, wd, in_hw, stride, pad))
            _accum(w, conv_blas.backward_weight_from_cols(g, cols, wd.shape))
            if b is not None:
                _accum(b, g.sum(axis=(1, 2)))
        _record(bwd)
    return out


def grid_sample(feature: Tensor, points) -> Tensor:
    """Bilinear sampling of feature[C,H,W] at continuous (x,y) points -> [C,P].

    Out-of-bounds neighbours contribute zero. Differentiable w.r.t. the feature
    values always and w.r.t. the point coordinates when `points` is a Tensor.
    """
    pts_t = points if isinstance(points, Tensor) else None
    pts = points.data if pts_t is not None else np.ascontiguousarray(points, dtype=feature.data.dtype)
    if pts.ndim != 2 or pts.shape[1] != 2:
        raise ShapeError(f"grid_sample: points must be [P,2], got {pts.shape}")
    if pts.dtype != feature.data.dtype:
        pts = pts.astype(feature.data.dtype)
    if not np.isfinite(pts).all():
        raise ValueError("grid_sample: points must be finite")
    y = K.grid_sample_forward(feature.data, pts)
    inputs = (feature,) if pts_t is None else (feature, pts_t)
    out, rec = _out(y, *inputs)
    if rec:
        fd = feature.data
        need_pts = pts_t is not None and pts_t.requires_grad
        def bwd():
            if out.grad is None:
                return
            gf, gp = K.grid_sample_backward(fd, pts, np.ascontiguousarray(out.grad), need_pts)
            _accum(feature, gf)
            if need_pts:
                _accum(pts_t, gp)
        _record(bwd)
    return out


# ---------------------------------------------------------------- losses


def smooth_l1(pred: Tensor, target: Tensor, beta: float = 1.0) -> Tensor:
    """Mean smooth-L1 (Huber) loss; 0.5*d^2/beta below beta, |d| - beta/2 above."""
    _same_shape(pred, target, "smooth_l1")
    d = pred.data - target.data
    ad = np.abs(d)
    elem = np.where(ad < beta, 0.5 * d * d / beta, ad - 0.5 * beta)
    out, rec = _out(np.asarray(elem.mean(), dtype=pred.data.dtype), pred, target)
    if rec:
        n = d.size
        def bwd():
            if out.grad is None:
                return
            g = out.grad * np.clip(d / beta, -1.0, 1.0) / n
            _accum(pred, g)
            _accum(target, -g)
        _record(bwd)
    return out


def cross_entropy(logits: Tensor, targets) -> Tensor:
    """Mean softmax cross-entropy; logits [N,K], integer targets [N]."""
    t = np.asarray(targets, dtype=np.int64)
    if logits.data.ndim != 2 or t.shape != (logits.data.shape[0],):
        raise ShapeError(f"cross_entropy: logits {logits.data.shape} vs targets {t.shape}")
    z = logits.data - logits.data.max(axis=1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=1, keepdims=True))
    logp = z - lse
    n = t.shape[0]
    loss = -logp[np.arange(n), t].mean()
    out, rec = _out(np.asarray(loss, dtype=logits.data.dtype), logits)
    if rec:
        p = np.exp(logp)
        def bwd():
            if out.grad is None:
                return
            g = p.copy()
            g[np.arange(n), t] -= 1.0
            _accum(logits, out.grad * g / n)
        _record(bwd)
    return out


def bce_with_logits(logits: Tensor, targets) -> Tensor:
    """Mean binary cross-entropy on logits; targets are 0/1 floats."""
    t = np.asarray(targets, dtype=logits.data.dtype)
    if t.shape != logits.data.shape:
        raise ShapeError(f"bce_with_logits: logits {logits.data.shape} vs targets {t.shape}")
    x = logits.data
    elem = np.maximum(x, 0) - x * t + np.log1p(np.exp(-np.abs(x)))
    out, rec = _out(np.asarray(elem.mean(), dtype=x.dtype), logits)
    if rec:
        n = x.size
        def bwd():
            if out.grad is None:
                return
            s = np.where(x >= 0, 1.0 / (1.0 + np.exp(-np.abs(x))),
                         np.exp(-np.abs(x)) / (1.0 + np.exp(-np.abs(x))))
            _accum(logits, out.grad * (s - t) / n)
        _record(bwd)
    return out


# ---------------------------------------------------------------- attention


@dataclass
class MHAParams:
    """Learned projections of one multi-head attention block.

    The key projection carries no bias: a per-query constant logit shift is
    invisible to softmax, so such a parameter would have an identically zero
    gradient.
    """

    wq: Tensor
    bq: Tensor
    wk: Tensor
    wv: Tensor
    bv: Tensor
    wo: Tensor
    bo: Tensor

    def tensors(self):
        return {"wq": self.wq, "bq": self.bq, "wk": self.wk,
                "wv": self.wv, "bv": self.bv, "wo": self.wo, "bo": self.bo}


def init_mha_params(rng: np.random.Generator, dim: int, heads: int, dtype=None) -> MHAParams:
    if dim % heads != 0:
        raise ValueError(f"attention dim {dim} not divisible by heads {heads}")
    dt = np.dtype(dtype) if dtype is not None else _default_dtype
    scale = 1.0 / math.sqrt(dim)
    def w():
        return Tensor((rng.standard_normal((dim, dim)) * scale).astype(dt), requires_grad=True)
    def b():
        return Tensor(np.zeros(dim, dtype=dt), requires_grad=True)
    return MHAParams(w(), b(), w(), w(), b(), w(), b())


def multi_head_attention(q: Tensor, k: Tensor, v: Tensor, heads: int, params: MHAParams) -> Tensor:
    """Scaled dot-product attention with one shared key/value set: q[N,D], k/v[M,D] -> [N,D]."""
    n, d = q.data.shape
    m = k.data.shape[0]
    if d % heads != 0:
        raise ValueError(f"attention dim {d} not divisible by heads {heads}")
    if k.data.shape != (m, d) or v.data.shape != (m, d):
        raise ShapeError(f"attention: k {k.data.shape} / v {v.data.shape} must be [M,{d}]")
    dh = d // heads
    qh = permute(reshape(linear(q, params.wq, params.bq), (n, heads, dh)), (1, 0, 2))
    kh = permute(reshape(linear(k, params.wk), (m, heads, dh)), (1, 2, 0))
    vh = permute(reshape(linear(v, params.wv, params.bv), (m, heads, dh)), (1, 0, 2))
    logits = mul_scalar(bmm(qh, kh), 1.0 / math.sqrt(dh))
    attn = softmax(logits)
    ctx = bmm(attn, vh)
    ctx = reshape(permute(ctx, (1, 0, 2)), (n, d))
    return linear(ctx, params.wo, params.bo)


def attention_over_sets(q: Tensor, kv: Tensor, heads: int, params: MHAParams) -> Tensor:
    """Row-wise attention: row i of q[R,D] attends to its own set kv[R,M,D] -> [R,D]."""
    r, d = q.data.shape
    if kv.data.ndim != 3 or kv.data.shape[0] != r or kv.data.shape[2] != d:
        raise ShapeError(f"attention_over_sets: q {q.data.shape} vs kv {kv.data.shape}")
    m = kv.data.shape[1]
    dh = d // heads
    qh = reshape(linear(q, params.wq, params.bq), (r * heads, 1, dh))
    kv_flat = reshape(kv, (r * m, d))
    kh = reshape(linear(kv_flat, params.wk), (r, m, heads, dh))
    kh = reshape(permute(kh, (0, 2, 3, 1)), (r * heads, dh, m))
    vh = reshape(linear(kv_flat, params.wv, params.bv), (r, m, heads, dh))
    vh = reshape(permute(vh, (0, 2, 1, 3)), (r * heads, m, dh))
    logits = mul_scalar(bmm(qh, kh), 1.0 / math.sqrt(dh))
    attn = softmax(logits)
    ctx = reshape(bmm(attn, vh), (r, d))
    return linear(ctx, params.wo, params.bo)
