"""Inverse optical flow providers for context-frame feature alignment.

A flow field holds, for every feature cell of the source frame t, the offset
(in feature pixels) to where that content sits in the target frame tau:
sampling the tau-frame content at p + offset(p) reconstructs the content at p
in frame t (exactly so for noise-free rigid translation).

Feature coordinate u maps to frame coordinate (u + 0.5) * stride - 0.5.
"""

import struct
from dataclasses import dataclass

import numpy as np

from . import _kernels as K
from .numcore import Tensor

FLOW_MAGIC = 0x4E544346  # "NTCF"
FLOW_VERSION = 1


@dataclass
class FlowField:
    """Offsets [H,W,2] as (dx, dy) in feature-pixel units, from source_time to target_time.

    The provider entry points below only produce inverse-chronological fields
    (target before source); the detector additionally builds same-frame and
    forward fields internally because context frames are shared across the
    whole window.
    """

    offsets: np.ndarray
    stride: int
    source_time: int
    target_time: int

    def __post_init__(self):
        self.offsets = np.ascontiguousarray(self.offsets, dtype=np.float32)
        if self.offsets.ndim != 3 or self.offsets.shape[2] != 2:
            raise ValueError(f"flow offsets must be [H,W,2], got {self.offsets.shape}")
        if not np.isfinite(self.offsets).all():
            raise ValueError("flow offsets must be finite")
        h, w = self.offsets.shape[:2]
        bound = h + w
        if np.abs(self.offsets).max(initial=0.0) > bound:
            raise ValueError(f"flow offsets exceed sanity bound {bound}")

    @property
    def height(self):
        return self.offsets.shape[0]

    @property
    def width(self):
        return self.offsets.shape[1]


def feature_cell_centers(height, width, stride):
    """Frame-pixel coordinates of feature cell centers, as a [H*W, 2] (x, y) array."""
    ys = (np.arange(height) + 0.5) * stride - 0.5
    xs = (np.arange(width) + 0.5) * stride - 0.5
    gx, gy = np.meshgrid(xs, ys)
    return np.stack([gx.reshape(-1), gy.reshape(-1)], axis=1)


def _motion_offsets(motion, t, tau, stride, height, width):
    pts = feature_cell_centers(height, width, stride)
    prev = motion.point_correspondence(pts, t, tau)
    return ((prev - pts) / float(stride)).reshape(height, width, 2).astype(np.float32)


def gt_inverse_flow(motion, t, tau, stride, height, width):
    """Analytic flow from the simulator's motion model; requires tau < t."""
    if tau >= t:
        raise ValueError(f"inverse flow needs tau < t, got t={t} tau={tau}")
    return FlowField(_motion_offsets(motion, t, tau, stride, height, width), stride, t, tau)


def motion_flow_any(motion, t, tau, stride, height, width):
    """Flow between any two frames (used for shared-context frames ahead of t)."""
    if tau == t:
        off = np.zeros((height, width, 2), dtype=np.float32)
    else:
        off = _motion_offsets(motion, t, tau, stride, height, width)
    return FlowField(off, stride, t, tau)


def block_matching_offsets(frame_t, frame_tau, block, radius, stride):
    """Raw block-matching offsets [H,W,2] in feature-pixel units.

    Searches the (2*radius+1)^2 integer displacements (frame pixels) that
    minimise the mean absolute difference between the block around each
    feature cell center in frame t and the displaced block in frame tau.
    Ties prefer the smaller |displacement|, then lexicographic (dx, dy).
    """
    it = np.ascontiguousarray(frame_t, dtype=np.float32)
    itau = np.ascontiguousarray(frame_tau, dtype=np.float32)
    if it.shape != itau.shape:
        raise ValueError(f"block matching needs same-shape frames, got {it.shape} vs {itau.shape}")
    if block % 2 == 0 or block < 1:
        raise ValueError(f"block size must be odd and positive, got {block}")
    if radius < 1:
        raise ValueError(f"search radius must be >= 1, got {radius}")
    h0, w0 = it.shape
    hf, wf = h0 // stride, w0 // stride
    centers = (np.arange(max(hf, wf)) + 0.5) * stride - 0.5
    cys = np.floor(centers[:hf] + 0.5).astype(np.int64)
    cxs = np.floor(centers[:wf] + 0.5).astype(np.int64)
    disp = [(dx, dy) for dy in range(-radius, radius + 1) for dx in range(-radius, radius + 1)]
    disp.sort(key=lambda d: (d[0] * d[0] + d[1] * d[1], d[0], d[1]))
    dxs = np.asarray([d[0] for d in disp], dtype=np.int64)
    dys = np.asarray([d[1] for d in disp], dtype=np.int64)
    off = K.block_match(it, itau, cys, cxs, dxs, dys, block)
    return np.asarray(off, dtype=np.float32) / float(stride)


def block_matching_flow(frame_t, frame_tau, block, radius, stride, t=1, tau=0):
    """Block-matching flow as a FlowField (frame indices default to a 1 -> 0 pair)."""
    return FlowField(block_matching_offsets(frame_t, frame_tau, block, radius, stride),
                     stride, t, tau)


def warp_check(feat_tau, feat_t, field: FlowField):
    """Mean |F_t(p) - F_tau(p + O(p))| over interior cells whose warp stays in bounds."""
    ftau = feat_tau.data if isinstance(feat_tau, Tensor) else np.asarray(feat_tau)
    ft = feat_t.data if isinstance(feat_t, Tensor) else np.asarray(feat_t)
    if ftau.ndim == 2:
        ftau = ftau[None]
    if ft.ndim == 2:
        ft = ft[None]
    c, h, w = ftau.shape
    if field.offsets.shape[:2] != (h, w) or ft.shape != ftau.shape:
        raise ValueError(
            f"warp_check: inconsistent shapes F_tau{ftau.shape} F_t{ft.shape} flow{field.offsets.shape}")
    gx, gy = np.meshgrid(np.arange(w, dtype=np.float64), np.arange(h, dtype=np.float64))
    wx = gx + field.offsets[:, :, 0]
    wy = gy + field.offsets[:, :, 1]
    interior = (gx >= 1) & (gx <= w - 2) & (gy >= 1) & (gy <= h - 2)
    valid = interior & (wx >= 0) & (wx <= w - 1) & (wy >= 0) & (wy <= h - 1)
    if not valid.any():
        return 0.0
    pts = np.stack([wx[valid], wy[valid]], axis=1)
    sampled = K.grid_sample_forward(np.ascontiguousarray(ftau, dtype=np.float64),
                                    np.ascontiguousarray(pts))
    ref = ft[:, valid]
    return float(np.abs(ref - sampled).mean())


def save_flow(field: FlowField, path):
    """Raw little-endian dump: 8 x uint32 header then float32 offsets."""
    header = struct.pack(
        "<8I", FLOW_MAGIC, FLOW_VERSION, field.height, field.width,
        field.stride, field.source_time, field.target_time, 0)
    with open(path, "wb") as fh:
        fh.write(header)
        fh.write(field.offsets.astype("<f4").tobytes())


def load_flow(path):
    with open(path, "rb") as fh:
        header = fh.read(32)
        magic, version, h, w, stride, t, tau, _ = struct.unpack("<8I", header)
        if magic != FLOW_MAGIC:
            raise ValueError(f"{path}: bad flow magic {magic:#x}")
        if version != FLOW_VERSION:
            raise ValueError(f"{path}: unsupported flow version {version}")
        data = np.frombuffer(fh.read(h * w * 2 * 4), dtype="<f4").reshape(h, w, 2)
    return FlowField(data.copy(), stride, t, tau)
