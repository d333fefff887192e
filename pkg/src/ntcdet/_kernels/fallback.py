"""Pure-numpy implementations of the sampling and matching kernels.

Semantics (padding rules, tie-breaking, tap ordering) must match the Cython
backend; only float accumulation order may differ, so cross-backend
comparisons are tolerance-based while each backend is bitwise deterministic
on its own. Convolution is shared between backends (see conv_blas).
"""

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .conv_blas import conv2d_backward_input, conv2d_backward_weight, conv2d_forward  # noqa: F401


def _taps(pts, h, w):
    x = pts[:, 0]
    y = pts[:, 1]
    x0 = np.floor(x).astype(np.int64)
    y0 = np.floor(y).astype(np.int64)
    x1 = x0 + 1
    y1 = y0 + 1
    fx = x - x0
    fy = y - y0
    taps = (
        (x0, y0, (1.0 - fx) * (1.0 - fy)),
        (x1, y0, fx * (1.0 - fy)),
        (x0, y1, (1.0 - fx) * fy),
        (x1, y1, fx * fy),
    )
    return taps, fx, fy


def grid_sample_forward(f, pts):
    c, h, w = f.shape
    taps, _, _ = _taps(pts, h, w)
    out = np.zeros((c, pts.shape[0]), dtype=f.dtype)
    for xi, yi, wt in taps:
        valid = (xi >= 0) & (xi < w) & (yi >= 0) & (yi < h)
        xc = np.clip(xi, 0, w - 1)
        yc = np.clip(yi, 0, h - 1)
        out += f[:, yc, xc] * (wt * valid)
    return out


def grid_sample_backward(f, pts, gy, need_pts_grad):
    c, h, w = f.shape
    taps, fx, fy = _taps(pts, h, w)
    gf = np.zeros((h * w, c), dtype=f.dtype)
    tap_vals = []
    for xi, yi, wt in taps:
        valid = (xi >= 0) & (xi < w) & (yi >= 0) & (yi < h)
        xc = np.clip(xi, 0, w - 1)
        yc = np.clip(yi, 0, h - 1)
        idx = (yc * w + xc)[valid]
        contrib = (gy * wt).T[valid]
        np.add.at(gf, idx, contrib)
        tap_vals.append(f[:, yc, xc] * valid)
    gf = np.ascontiguousarray(gf.T.reshape(c, h, w))
    if not need_pts_grad:
        return gf, None
    v00, v10, v01, v11 = tap_vals
    one = np.ones_like(fx)
    dx = (-(one - fy) * v00 + (one - fy) * v10 - fy * v01 + fy * v11)
    dy = (-(one - fx) * v00 - fx * v10 + (one - fx) * v01 + fx * v11)
    gpts = np.stack([(gy * dx).sum(axis=0), (gy * dy).sum(axis=0)], axis=1)
    return gf, np.ascontiguousarray(gpts)


def _box_sums(img, block):
    """Sliding block-window sums with zero padding outside the image."""
    half = block // 2
    h, w = img.shape
    padded = np.zeros((h + block - 1, w + block - 1), dtype=img.dtype)
    padded[half : half + h, half : half + w] = img
    win = sliding_window_view(padded, (block, block))
    return win.sum(axis=(2, 3))


def block_match(it, itau, cys, cxs, dxs, dys, block):
    """Integer-displacement SAD search at the given cell centers.

    Displacements are scanned in the order given (caller sorts them by the
    tie-break rule: smaller |d| first, then lexicographic); strictly smaller
    mean SAD wins, so ties keep the earliest candidate.
    """
    h, w = it.shape
    ny, nx = len(cys), len(cxs)
    best_sad = np.full((ny, nx), np.inf, dtype=np.float64)
    best_dx = np.zeros((ny, nx), dtype=np.float64)
    best_dy = np.zeros((ny, nx), dtype=np.float64)
    cyi = np.asarray(cys)[:, None]
    cxi = np.asarray(cxs)[None, :]
    for dx, dy in zip(dxs, dys):
        diff = np.zeros((h, w), dtype=np.float64)
        mask = np.zeros((h, w), dtype=np.float64)
        # positions p where both p (in I_t) and p+d (in I_tau) are in bounds
        ty0, ty1 = max(0, -dy), min(h, h - dy)
        tx0, tx1 = max(0, -dx), min(w, w - dx)
        if ty1 > ty0 and tx1 > tx0:
            diff[ty0:ty1, tx0:tx1] = np.abs(
                it[ty0:ty1, tx0:tx1] - itau[ty0 + dy : ty1 + dy, tx0 + dx : tx1 + dx]
            )
            mask[ty0:ty1, tx0:tx1] = 1.0
        sad_map = _box_sums(diff, block)
        cnt_map = _box_sums(mask, block)
        sad = sad_map[cyi, cxi]
        cnt = cnt_map[cyi, cxi]
        mean_sad = np.where(cnt > 0, sad / np.maximum(cnt, 1.0), np.inf)
        better = mean_sad < best_sad
        best_sad = np.where(better, mean_sad, best_sad)
        best_dx = np.where(better, float(dx), best_dx)
        best_dy = np.where(better, float(dy), best_dy)
    return np.ascontiguousarray(np.stack([best_dx, best_dy], axis=-1))
