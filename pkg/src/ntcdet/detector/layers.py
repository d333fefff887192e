"""Parameterized building blocks of the detector."""

import math

import numpy as np

from .. import numcore as nc
from ..numcore import MHAParams, Tensor, init_mha_params


class Layer:
    """Minimal container: recursively collects named parameter tensors."""

    def named_params(self, prefix=""):
        out = {}
        for name, v in vars(self).items():
            key = f"{prefix}{name}"
            if isinstance(v, Tensor):
                if v.requires_grad:
                    out[key] = v
            elif isinstance(v, Layer):
                out.update(v.named_params(f"{key}."))
            elif isinstance(v, MHAParams):
                for pname, p in v.tensors().items():
                    out[f"{key}.{pname}"] = p
            elif isinstance(v, (list, tuple)):
                for i, item in enumerate(v):
                    if isinstance(item, Layer):
                        out.update(item.named_params(f"{key}.{i}."))
        return out

    def load_state(self, arrays):
        params = self.named_params()
        missing = sorted(set(params) - set(arrays))
        if missing:
            raise ValueError(f"checkpoint is missing parameters: {missing[:5]}{'...' if len(missing) > 5 else ''}")
        for name, p in params.items():
            arr = np.asarray(arrays[name])
            if tuple(arr.shape) != tuple(p.data.shape):
                raise ValueError(f"parameter {name}: checkpoint shape {arr.shape} != model shape {p.data.shape}")
            p.data = np.ascontiguousarray(arr, dtype=p.data.dtype)

    def state_arrays(self):
        return {name: p.data for name, p in self.named_params().items()}


class Linear(Layer):
    def __init__(self, rng, in_dim, out_dim, std=None, bias=True, bias_init=0.0):
        dt = nc.default_dtype()
        std = (1.0 / math.sqrt(in_dim)) if std is None else std
        self.w = Tensor((rng.standard_normal((out_dim, in_dim)) * std).astype(dt), requires_grad=True)
        self.b = Tensor(np.full(out_dim, bias_init, dtype=dt), requires_grad=True) if bias else None

    def __call__(self, x):
        return nc.linear(x, self.w, self.b)


class Conv(Layer):
    def __init__(self, rng, cin, cout, k=3, stride=1, pad=1, bias_init=0.0):
        dt = nc.default_dtype()
        std = math.sqrt(2.0 / (cin * k * k))
        self.w = Tensor((rng.standard_normal((cout, cin, k, k)) * std).astype(dt), requires_grad=True)
        self.b = Tensor(np.full(cout, bias_init, dtype=dt), requires_grad=True)
        self.stride = stride
        self.pad = pad

    def __call__(self, x):
        return nc.conv2d(x, self.w, self.b, stride=self.stride, pad=self.pad)


class Backbone(Layer):
    """Four 3x3 convs (two of stride 2): total stride 4, single-channel input."""

    def __init__(self, rng, out_channels):
        self.conv1 = Conv(rng, 1, 16, stride=2)
        self.conv2 = Conv(rng, 16, 32, stride=2)
        self.conv3 = Conv(rng, 32, 32)
        self.conv4 = Conv(rng, 32, out_channels)

    def __call__(self, frame):
        x = nc.relu(self.conv1(frame))
        x = nc.relu(self.conv2(x))
        x = nc.relu(self.conv3(x))
        return nc.relu(self.conv4(x))


class RpnHead(Layer):
    """Shared 3x3 conv then 1x1 objectness / box-delta heads, one anchor per cell."""

    def __init__(self, rng, channels):
        self.conv = Conv(rng, channels, channels)
        self.obj = Conv(rng, channels, 1, k=1, pad=0, bias_init=-2.0)
        self.reg = Conv(rng, channels, 4, k=1, pad=0)

    def __call__(self, feat):
        x = nc.relu(self.conv(feat))
        hf, wf = x.data.shape[1], x.data.shape[2]
        obj = nc.reshape(self.obj(x), (hf * wf,))
        deltas = nc.reshape(nc.permute(self.reg(x), (1, 2, 0)), (hf * wf, 4))
        return obj, deltas


def pairwise_geometry(boxes, eps=1e-3, dtype=np.float32):
    """4-d log-space geometry features for every ordered box pair -> [R,R,4]."""
    b = np.asarray(boxes, dtype=dtype)
    w = np.maximum(b[:, 2] - b[:, 0], 1e-3)
    h = np.maximum(b[:, 3] - b[:, 1], 1e-3)
    cx = b[:, 0] + 0.5 * w
    cy = b[:, 1] + 0.5 * h
    logw = np.log(w)
    logh = np.log(h)
    r = b.shape[0]
    out = np.empty((r, r, 4), dtype=dtype)
    np.log(np.abs(cx[None, :] - cx[:, None]) / w[:, None] + eps, out=out[:, :, 0])
    np.log(np.abs(cy[None, :] - cy[:, None]) / h[:, None] + eps, out=out[:, :, 1])
    out[:, :, 2] = logw[None, :] - logw[:, None]
    out[:, :, 3] = logh[None, :] - logh[:, None]
    return out


class RelationLayer(Layer):
    """Residual attention among all proposals: appearance logits plus a learned
    per-head bias computed from box-pair geometry."""

    def __init__(self, rng, dim, heads):
        self.attn = init_mha_params(rng, dim, heads)
        # biasless: a constant shift over all pairs is invisible to softmax
        self.geo = Linear(rng, 4, heads, std=0.1, bias=False)
        self.heads = heads

    def __call__(self, q, boxes, geom=None):
        r, d = q.data.shape
        if boxes.shape[0] != r:
            raise nc.ShapeError(f"relation: {r} feature rows vs {boxes.shape[0]} boxes")
        h = self.heads
        dh = d // h
        p = self.attn
        if geom is None:
            geom = pairwise_geometry(boxes).astype(q.data.dtype)
        bias = nc.permute(nc.reshape(self.geo(Tensor(geom.reshape(r * r, 4))), (r, r, h)), (2, 0, 1))
        qh = nc.permute(nc.reshape(nc.linear(q, p.wq, p.bq), (r, h, dh)), (1, 0, 2))
        kh = nc.permute(nc.reshape(nc.linear(q, p.wk), (r, h, dh)), (1, 2, 0))
        vh = nc.permute(nc.reshape(nc.linear(q, p.wv, p.bv), (r, h, dh)), (1, 0, 2))
        logits = nc.add(nc.mul_scalar(nc.bmm(qh, kh), 1.0 / math.sqrt(dh)), bias)
        attn = nc.softmax(logits)
        ctx = nc.reshape(nc.permute(nc.bmm(attn, vh), (1, 0, 2)), (r, d))
        return nc.add(q, nc.linear(ctx, p.wo, p.bo))


class ContextFusionLayer(Layer):
    """Residual attention from each proposal to its own context-frame features."""

    def __init__(self, rng, dim, heads):
        self.attn = init_mha_params(rng, dim, heads)
        self.heads = heads

    def __call__(self, q, ctx):
        if ctx.data.shape[0] != q.data.shape[0]:
            raise nc.ShapeError(
                f"context fusion: {q.data.shape[0]} proposals vs {ctx.data.shape[0]} context rows")
        return nc.add(q, nc.attention_over_sets(q, ctx, self.heads, self.attn))
