"""The detector: per-frame backbone/proposals, temporal context extraction with
flow-deformed RoI grids, stacked context-fusion + relation layers, and heads.

With ntca_enabled=False the forward path reduces to the basic detector
(per-frame proposals + relation layers only); no context or flow code runs.
"""

from dataclasses import dataclass, field

import numpy as np

from .. import numcore as nc
from ..boxes import clip_boxes, decode_deltas, nms
from ..config import ConfigError, HeadConfig
from ..flow import block_matching_offsets, motion_flow_any
from ..numcore import Tensor
from . import pooling
from .layers import (
    Backbone,
    ContextFusionLayer,
    Layer,
    Linear,
    RelationLayer,
    RpnHead,
    pairwise_geometry,
)


@dataclass
class BoxList:
    """Per-frame proposal boxes (frame pixels) with objectness scores."""

    boxes: np.ndarray
    scores: np.ndarray
    frame_index: int

    def __post_init__(self):
        self.boxes = np.asarray(self.boxes, dtype=np.float64).reshape(-1, 4)
        self.scores = np.asarray(self.scores, dtype=np.float64).reshape(-1)


@dataclass
class ProposalFeatures:
    features: Tensor  # [N, D]
    frame_index: int
    level: object = "raw"  # "raw" | "ctxt" | layer index


@dataclass
class ContextFeatures:
    features: Tensor  # [N, T_ctxt, D]
    source_frames: tuple


@dataclass
class FrameArtifacts:
    """Everything per-frame that the rolling inference cache holds."""

    frame_index: int
    frame: np.ndarray          # raw [H0, W0] (kept for block-matching flow)
    feat: Tensor               # backbone output [C, H, W]
    boxlist: BoxList
    q0: Tensor                 # pooled+projected proposal features [N, D]
    rpn_obj: Tensor            # [A] objectness logits (training losses)
    rpn_deltas: Tensor         # [A, 4]
    anchors: np.ndarray        # [A, 4]


@dataclass
class Detections:
    boxes: np.ndarray   # [N, 4]
    scores: np.ndarray  # [N] in [0, 1]
    frame_index: int


@dataclass
class WindowOutput:
    frame_ids: list
    context_ids: list
    artifacts: dict                  # frame id -> FrameArtifacts
    cls_logits: Tensor               # [(T+1)*N, 2]
    deltas: Tensor                   # [(T+1)*N, 4]
    detections: Detections           # current frame
    proposals: BoxList               # current frame proposal stage

    def slot_rows(self, slot, n):
        return nc.narrow(self.cls_logits, slot * n, n), nc.narrow(self.deltas, slot * n, n)


def sample_context_frames(t, t_prev, t_ctxt):
    """Evenly spaced context frame indices {t-1, ...}, clamped at the clip start.

    index_j = t - 1 - floor((j-1)*(T-1)/max(T_ctxt-1, 1)) for j = 1..T_ctxt;
    duplicates appear near the clip start by design.
    """
    if not (1 <= t_ctxt <= t_prev):
        raise ConfigError(f"need 1 <= t_ctxt <= t_prev, got {t_ctxt} / {t_prev}")
    out = []
    for j in range(1, t_ctxt + 1):
        raw = t - 1 - ((j - 1) * (t_prev - 1)) // max(t_ctxt - 1, 1)
        out.append(max(raw, 0))
    return out


def make_anchors(hf, wf, stride, size):
    """One square anchor per feature cell, centered on the cell center."""
    ys = (np.arange(hf) + 0.5) * stride - 0.5
    xs = (np.arange(wf) + 0.5) * stride - 0.5
    gx, gy = np.meshgrid(xs, ys)
    cx = gx.reshape(-1)
    cy = gy.reshape(-1)
    half = size / 2.0
    return np.stack([cx - half, cy - half, cx + half, cy + half], axis=1)


def _sigmoid(x):
    return np.where(x >= 0, 1.0 / (1.0 + np.exp(-np.abs(x))),
                    np.exp(-np.abs(x)) / (1.0 + np.exp(-np.abs(x))))


def propose_regions(obj_logits, deltas, anchors, frame_hw, k, nms_iou=0.7, frame_index=0):
    """Decode one-anchor-per-cell RPN output into the top-k proposal BoxList."""
    if k < 1:
        raise ValueError("k must be >= 1")
    scores = _sigmoid(np.asarray(obj_logits.data, dtype=np.float64))
    boxes = decode_deltas(anchors, deltas.data)
    boxes = clip_boxes(boxes, frame_hw[1], frame_hw[0])
    keep = nms(boxes, scores, nms_iou, max_keep=k)
    sel = list(keep[:k])
    while len(sel) < k:
        sel.append(sel[-1])
    sel = np.asarray(sel, dtype=np.int64)
    return BoxList(boxes[sel], scores[sel], frame_index), sel


class ZeroFlowSource:
    def offsets(self, t, tau, hf, wf, frame_t=None, frame_tau=None):
        return np.zeros((hf, wf, 2), dtype=np.float32)


class GroundTruthFlowSource:
    def __init__(self, motion, stride):
        self.motion = motion
        self.stride = stride
        self._cache = {}

    def offsets(self, t, tau, hf, wf, frame_t=None, frame_tau=None):
        key = (t, tau)
        if key not in self._cache:
            self._cache[key] = motion_flow_any(self.motion, t, tau, self.stride, hf, wf).offsets
        return self._cache[key]


class BlockMatchingFlowSource:
    def __init__(self, block, radius, stride):
        self.block = block
        self.radius = radius
        self.stride = stride
        self._cache = {}

    def offsets(self, t, tau, hf, wf, frame_t=None, frame_tau=None):
        key = (t, tau)
        if key not in self._cache:
            if t == tau:
                off = np.zeros((hf, wf, 2), dtype=np.float32)
            else:
                off = block_matching_offsets(frame_t, frame_tau, self.block, self.radius, self.stride)
            self._cache[key] = off
        return self._cache[key]


def make_flow_source(cfg: HeadConfig, motion=None):
    if cfg.flow_provider == "zero":
        return ZeroFlowSource()
    if cfg.flow_provider == "ground_truth":
        if motion is None:
            raise ValueError("ground_truth flow provider needs the clip's motion model")
        return GroundTruthFlowSource(motion, cfg.flow_stride)
    return BlockMatchingFlowSource(cfg.block_size, cfg.search_radius, cfg.flow_stride)


class UltraDet(Layer):
    def __init__(self, cfg: HeadConfig, rng):
        self.cfg = cfg
        self.backbone = Backbone(rng, cfg.channels)
        self.rpn = RpnHead(rng, cfg.channels)
        self.proj = Linear(rng, cfg.channels, cfg.feature_dim)
        self._uses_context = cfg.ntca_enabled and cfg.aggregation in ("roi", "both")
        if self._uses_context:
            self.fusion = [ContextFusionLayer(rng, cfg.feature_dim, cfg.heads)
                           for _ in range(cfg.layers)]
        else:
            self.fusion = []
        self.relation = [RelationLayer(rng, cfg.feature_dim, cfg.heads)
                         for _ in range(cfg.layers)]
        self.cls_head = Linear(rng, cfg.feature_dim, 2, std=0.01)
        self.reg_head = Linear(rng, cfg.feature_dim, 4, std=0.01)

    # ---------------------------------------------------------------- frames

    def extract_features(self, frame):
        """Backbone features at stride 4; frame is [H0,W0] or [1,H0,W0]."""
        arr = frame.data if isinstance(frame, Tensor) else np.asarray(frame)
        if arr.ndim == 2:
            arr = arr[None]
        if arr.shape[1] % 4 or arr.shape[2] % 4:
            raise ValueError(
                f"frame dims {arr.shape[1]}x{arr.shape[2]} not divisible by 4; pad frames at ingest")
        x = frame if isinstance(frame, Tensor) else Tensor(arr, dtype=nc.default_dtype())
        if x.data.ndim == 2:
            x = nc.reshape(x, (1,) + x.data.shape)
        return self.backbone(x)

    def frame_artifacts(self, frame, frame_index):
        """Per-frame compute: features, proposals, pooled features (cacheable)."""
        frame = np.asarray(frame)
        feat = self.extract_features(frame)
        hf, wf = feat.data.shape[1], feat.data.shape[2]
        anchors = make_anchors(hf, wf, self.cfg.flow_stride, self.cfg.anchor_size)
        obj, deltas = self.rpn(feat)
        frame_hw = (hf * self.cfg.flow_stride, wf * self.cfg.flow_stride)
        boxlist, _ = propose_regions(obj, deltas, anchors, frame_hw,
                                     self.cfg.proposals, frame_index=frame_index)
        q0, _ = pooling.roi_align_pool(feat, boxlist.boxes, self.cfg.grid,
                                       self.cfg.flow_stride, self.proj)
        return FrameArtifacts(frame_index, frame, feat, boxlist, q0, obj, deltas, anchors)

    # ---------------------------------------------------------------- window

    def forward_window(self, frames, frame_ids, flow_source, cache=None):
        """Process a T+1 frame window; emits detections for the last frame.

        `frames` is aligned with `frame_ids` (absolute indices, clip-start
        padding duplicates the first frame). Entries whose id is in `cache`
        may be None: the cached per-frame artifacts are reused.
        """
        cfg = self.cfg
        if len(frame_ids) != cfg.t_prev + 1 or len(frames) != len(frame_ids):
            raise ValueError(
                f"window must hold t_prev+1 = {cfg.t_prev + 1} frames, got {len(frame_ids)}")
        unique_ids = sorted(set(frame_ids))
        arts = {}
        for uid in unique_ids:
            if cache is not None and uid in cache:
                arts[uid] = cache[uid]
            else:
                arts[uid] = self.frame_artifacts(frames[frame_ids.index(uid)], uid)
        t_cur = frame_ids[-1]
        ctx_ids = sample_context_frames(t_cur, cfg.t_prev, cfg.t_ctxt)
        for cid in ctx_ids:
            if cid not in arts:
                raise ValueError(f"context frame {cid} not inside the window {frame_ids}")

        hf, wf = arts[t_cur].feat.data.shape[1], arts[t_cur].feat.data.shape[2]
        need_flow = (self._uses_context and cfg.iof_align) or cfg.aggregation in ("feature", "both")
        flows = {}
        if need_flow:
            for uid in unique_ids:
                for cid in ctx_ids:
                    if (uid, cid) not in flows:
                        flows[(uid, cid)] = flow_source.offsets(
                            uid, cid, hf, wf, arts[uid].frame, arts[cid].frame)

        # feature-level temporal aggregation (Table-3 variant): average warped maps
        q_by_id = {}
        if cfg.aggregation in ("feature", "both"):
            for uid in unique_ids:
                maps = [arts[uid].feat]
                for cid in ctx_ids:
                    maps.append(pooling.warp_feature_map(arts[cid].feat, flows[(uid, cid)]))
                merged = nc.mean(nc.stack(maps, 0), 0)
                q, _ = pooling.roi_align_pool(merged, arts[uid].boxlist.boxes,
                                              cfg.grid, cfg.flow_stride, self.proj)
                q_by_id[uid] = q
        else:
            for uid in unique_ids:
                q_by_id[uid] = arts[uid].q0

        ctx_all = None
        if self._uses_context:
            n = cfg.proposals
            gg = cfg.grid * cfg.grid
            all_boxes = np.concatenate([arts[fid].boxlist.boxes for fid in frame_ids], 0)
            base_pts, degenerate = pooling.window_grid(all_boxes, cfg.grid, cfg.flow_stride)
            per_ctx = []
            for cid in ctx_ids:
                if cfg.iof_align:
                    offs = np.concatenate([
                        pooling.sample_flow_offsets(
                            flows[(fid, cid)], base_pts[s * n * gg:(s + 1) * n * gg])
                        for s, fid in enumerate(frame_ids)], 0)
                else:
                    offs = None
                per_ctx.append(pooling.batched_context_pool(
                    arts[cid].feat, base_pts, degenerate, offs, cfg.grid, self.proj))
            ctx_all = nc.stack(per_ctx, 1)  # [(T+1)*N, T_ctxt, D]

        q = nc.concat([q_by_id[fid] for fid in frame_ids], 0)
        boxes_all = np.concatenate([arts[fid].boxlist.boxes for fid in frame_ids], 0)
        geom = pairwise_geometry(boxes_all).astype(q.data.dtype)
        for layer in range(cfg.layers):
            if self._uses_context:
                if cfg.temp_agg:
                    q = self.fusion[layer](q, ctx_all)
                else:
                    q = nc.add(q, nc.mean(ctx_all, 1))
            q = self.relation[layer](q, boxes_all, geom=geom)
        cls_logits = self.cls_head(q)
        deltas = self.reg_head(q)

        out = WindowOutput(list(frame_ids), ctx_ids, arts, cls_logits, deltas,
                           detections=None, proposals=arts[t_cur].boxlist)
        out.detections = self.decode_slot(out, len(frame_ids) - 1)
        return out

    def decode_slot(self, out: WindowOutput, slot):
        """Refined boxes + lesion probabilities for one window slot."""
        n = self.cfg.proposals
        fid = out.frame_ids[slot]
        arts = out.artifacts[fid]
        logits = out.cls_logits.data[slot * n:(slot + 1) * n]
        z = logits - logits.max(axis=1, keepdims=True)
        e = np.exp(z)
        scores = (e[:, 1] / e.sum(axis=1)).astype(np.float64)
        d = out.deltas.data[slot * n:(slot + 1) * n]
        h0, w0 = arts.frame.shape
        boxes = clip_boxes(decode_deltas(arts.boxlist.boxes, d), w0, h0)
        return Detections(boxes, scores, fid)


def window_ids(t, t_prev):
    """Absolute frame indices of the window ending at t (clip-start duplicates frame 0)."""
    return [max(0, t - t_prev + i) for i in range(t_prev + 1)]


def ultradet_forward(model: UltraDet, frames, frame_ids, flow_source, cache=None):
    return model.forward_window(frames, frame_ids, flow_source, cache=cache)
