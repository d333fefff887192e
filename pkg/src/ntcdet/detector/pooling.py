"""RoI feature pooling: regular grids, optionally deformed by a flow field.

Frame coordinate x corresponds to feature coordinate (x + 0.5) / stride - 0.5.
Feature sampling uses zero padding outside the map; the flow lookup clamps its
query points to the map border instead, so a constant flow behaves like a rigid
box translation everywhere.
"""

import numpy as np

from .. import _kernels as K
from .. import numcore as nc


def roi_grid_points(boxes, grid):
    """g*g sample points at cell centers of each box, frame pixels -> [N*g*g, 2]."""
    b = np.asarray(boxes, dtype=np.float64)
    n = b.shape[0]
    steps = (np.arange(grid) + 0.5) / grid
    xs = b[:, 0:1] + steps[None, :] * (b[:, 2:3] - b[:, 0:1])  # [N, g]
    ys = b[:, 1:2] + steps[None, :] * (b[:, 3:4] - b[:, 1:2])
    gx = np.broadcast_to(xs[:, None, :], (n, grid, grid))
    gy = np.broadcast_to(ys[:, :, None], (n, grid, grid))
    return np.stack([gx.reshape(-1), gy.reshape(-1)], axis=1)


def to_feature_coords(pts, stride):
    return (np.asarray(pts, dtype=np.float64) + 0.5) / float(stride) - 0.5


def sample_flow_offsets(offsets, pts_feat):
    """Bilinear flow lookup with border-clamped query points; offsets [H,W,2]."""
    h, w = offsets.shape[:2]
    pts = np.asarray(pts_feat, dtype=np.float64).copy()
    pts[:, 0] = np.clip(pts[:, 0], 0.0, w - 1.0)
    pts[:, 1] = np.clip(pts[:, 1], 0.0, h - 1.0)
    planes = np.ascontiguousarray(offsets.transpose(2, 0, 1), dtype=np.float64)
    return K.grid_sample_forward(planes, np.ascontiguousarray(pts)).T  # [P, 2]


def pooled_roi_features(feat, boxes, grid, stride, flow_offsets=None):
    """Average-pooled grid samples per box -> ([N, C] Tensor, degenerate flags).

    With `flow_offsets` the grid is deformed: each point p samples at p + O(p).
    Degenerate (zero-area) boxes pool to exact zeros and are flagged.
    """
    b = np.asarray(boxes, dtype=np.float64)
    n = b.shape[0]
    c = feat.data.shape[0]
    degenerate = ((b[:, 2] - b[:, 0]) < 1e-6) | ((b[:, 3] - b[:, 1]) < 1e-6)
    pts = to_feature_coords(roi_grid_points(b, grid), stride)
    if flow_offsets is not None:
        pts = pts + sample_flow_offsets(flow_offsets, pts)
    sampled = nc.grid_sample(feat, pts.astype(feat.data.dtype))       # [C, N*g*g]
    pooled = nc.avg_pool(nc.reshape(sampled, (c, n, grid * grid)), 2)  # [C, N]
    pooled = nc.permute(pooled, (1, 0))                                # [N, C]
    if degenerate.any():
        mask = np.broadcast_to(~degenerate[:, None], (n, c)).astype(feat.data.dtype)
        pooled = nc.mul(pooled, nc.Tensor(mask))
    return pooled, degenerate


def roi_align_pool(feat, boxes, grid, stride, projection):
    """RoI Align + average pooling + learned projection to the head dimension."""
    pooled, degenerate = pooled_roi_features(feat, boxes, grid, stride)
    return projection(pooled), degenerate


def iof_align_pool(feat_tau, boxes_t, flow_offsets, grid, stride, projection):
    """Context pooling from a past feature map through flow-deformed grids."""
    pooled, degenerate = pooled_roi_features(feat_tau, boxes_t, grid, stride, flow_offsets)
    return projection(pooled), degenerate


def window_grid(all_boxes, grid, stride):
    """Base sample grid over concatenated slot boxes, plus degenerate flags."""
    b = np.asarray(all_boxes, dtype=np.float64)
    degenerate = ((b[:, 2] - b[:, 0]) < 1e-6) | ((b[:, 3] - b[:, 1]) < 1e-6)
    pts = to_feature_coords(roi_grid_points(b, grid), stride)
    return pts, degenerate


def batched_context_pool(feat_c, base_pts, degenerate, offsets, grid, projection):
    """Pool every slot's (optionally flow-deformed) grid from one context map
    in a single sampling pass -> Tensor [R, D].

    `offsets` is a [R*g*g, 2] per-point deformation (already flow-sampled at
    the base points) or None for undeformed grids.
    """
    pts = base_pts if offsets is None else base_pts + offsets
    n = degenerate.shape[0]
    c = feat_c.data.shape[0]
    sampled = nc.grid_sample(feat_c, pts.astype(feat_c.data.dtype))
    pooled = nc.permute(nc.avg_pool(nc.reshape(sampled, (c, n, grid * grid)), 2), (1, 0))
    if degenerate.any():
        mask = np.broadcast_to(~degenerate[:, None], (n, c)).astype(feat_c.data.dtype)
        pooled = nc.mul(pooled, nc.Tensor(mask))
    return projection(pooled)


def warp_feature_map(feat_tau, flow_offsets):
    """Whole-map warp: output cell p takes feat_tau sampled at p + O(p) -> [C,H,W]."""
    c, h, w = feat_tau.data.shape
    gx, gy = np.meshgrid(np.arange(w, dtype=np.float64), np.arange(h, dtype=np.float64))
    pts = np.stack([(gx + flow_offsets[:, :, 0]).reshape(-1),
                    (gy + flow_offsets[:, :, 1]).reshape(-1)], axis=1)
    sampled = nc.grid_sample(feat_tau, pts.astype(feat_tau.data.dtype))
    return nc.reshape(sampled, (c, h, w))
