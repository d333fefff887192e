"""Axis-aligned box geometry shared by the detector and the evaluation kit.

Boxes are (x1, y1, x2, y2) in continuous frame-pixel coordinates with
area = (x2-x1) * (y2-y1); no +1 pixel convention anywhere.
"""

import numpy as np


def iou(a, b):
    """Intersection over union of two boxes; 0 when disjoint."""
    ix = min(a[2], b[2]) - max(a[0], b[0])
    iy = min(a[3], b[3]) - max(a[1], b[1])
    if ix <= 0 or iy <= 0:
        return 0.0
    inter = ix * iy
    area_a = (a[2] - a[0]) * (a[3] - a[1])
    area_b = (b[2] - b[0]) * (b[3] - b[1])
    return float(inter / (area_a + area_b - inter))


def iou_matrix(a, b):
    """Pairwise IoU of boxes a[N,4] and b[M,4] -> [N,M]."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.size == 0 or b.size == 0:
        return np.zeros((a.shape[0], b.shape[0]))
    ix = np.minimum(a[:, None, 2], b[None, :, 2]) - np.maximum(a[:, None, 0], b[None, :, 0])
    iy = np.minimum(a[:, None, 3], b[None, :, 3]) - np.maximum(a[:, None, 1], b[None, :, 1])
    inter = np.clip(ix, 0, None) * np.clip(iy, 0, None)
    area_a = (a[:, 2] - a[:, 0]) * (a[:, 3] - a[:, 1])
    area_b = (b[:, 2] - b[:, 0]) * (b[:, 3] - b[:, 1])
    union = area_a[:, None] + area_b[None, :] - inter
    return np.where(inter > 0, inter / np.maximum(union, 1e-12), 0.0)


def nms(boxes, scores, iou_thresh, max_keep=None):
    """Greedy NMS keeping score order (ties by lower index); suppress IoU > thresh."""
    b = np.asarray(boxes, dtype=np.float64)
    s = np.asarray(scores, dtype=np.float64)
    order = np.lexsort((np.arange(len(s)), -s))
    x1, y1, x2, y2 = b[:, 0], b[:, 1], b[:, 2], b[:, 3]
    areas = (x2 - x1) * (y2 - y1)
    alive = np.ones(len(s), dtype=bool)
    keep = []
    for i in order:
        if not alive[i]:
            continue
        keep.append(int(i))
        if max_keep is not None and len(keep) >= max_keep:
            break
        ix = np.minimum(x2[i], x2) - np.maximum(x1[i], x1)
        iy = np.minimum(y2[i], y2) - np.maximum(y1[i], y1)
        inter = np.clip(ix, 0, None) * np.clip(iy, 0, None)
        iou = np.where(inter > 0, inter / np.maximum(areas[i] + areas - inter, 1e-12), 0.0)
        alive &= iou <= iou_thresh
        alive[i] = False
    return np.asarray(keep, dtype=np.int64)


def clip_boxes(boxes, width, height, min_size=1e-2):
    """Clip to [0,width]x[0,height], enforcing a strictly positive extent."""
    b = np.asarray(boxes, dtype=np.float64).copy()
    b[:, 0] = np.clip(b[:, 0], 0.0, width - min_size)
    b[:, 1] = np.clip(b[:, 1], 0.0, height - min_size)
    b[:, 2] = np.clip(b[:, 2], min_size, width)
    b[:, 3] = np.clip(b[:, 3], min_size, height)
    b[:, 2] = np.maximum(b[:, 2], b[:, 0] + min_size)
    b[:, 3] = np.maximum(b[:, 3], b[:, 1] + min_size)
    return b


def encode_deltas(ref_boxes, target_boxes):
    """Box regression targets (dx, dy, dw, dh) of target relative to reference."""
    ref = np.asarray(ref_boxes, dtype=np.float64)
    tgt = np.asarray(target_boxes, dtype=np.float64)
    rw = ref[:, 2] - ref[:, 0]
    rh = ref[:, 3] - ref[:, 1]
    rcx = ref[:, 0] + 0.5 * rw
    rcy = ref[:, 1] + 0.5 * rh
    tw = tgt[:, 2] - tgt[:, 0]
    th = tgt[:, 3] - tgt[:, 1]
    tcx = tgt[:, 0] + 0.5 * tw
    tcy = tgt[:, 1] + 0.5 * th
    rw = np.maximum(rw, 1e-6)
    rh = np.maximum(rh, 1e-6)
    return np.stack([
        (tcx - rcx) / rw,
        (tcy - rcy) / rh,
        np.log(np.maximum(tw, 1e-6) / rw),
        np.log(np.maximum(th, 1e-6) / rh),
    ], axis=1)


def decode_deltas(ref_boxes, deltas, max_log_wh=4.0):
    """Apply (dx, dy, dw, dh) deltas to reference boxes; log-extents clamped."""
    ref = np.asarray(ref_boxes, dtype=np.float64)
    d = np.asarray(deltas, dtype=np.float64)
    rw = ref[:, 2] - ref[:, 0]
    rh = ref[:, 3] - ref[:, 1]
    rcx = ref[:, 0] + 0.5 * rw
    rcy = ref[:, 1] + 0.5 * rh
    cx = rcx + d[:, 0] * rw
    cy = rcy + d[:, 1] * rh
    w = rw * np.exp(np.clip(d[:, 2], -max_log_wh, max_log_wh))
    h = rh * np.exp(np.clip(d[:, 3], -max_log_wh, max_log_wh))
    return np.stack([cx - 0.5 * w, cy - 0.5 * h, cx + 0.5 * w, cy + 0.5 * h], axis=1)
