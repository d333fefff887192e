# cython: boundscheck=False, wraparound=False, cdivision=True, language_level=3
"""Compiled hot kernels: bilinear grid sampling (forward/backward) and
block-match SAD search. These are gather/scatter loops that vectorized numpy
handles poorly; convolution lives in conv_blas (im2col + BLAS) instead.

Must keep the same semantics as fallback.py (zero padding, tap order,
tie-breaking); only float accumulation order may differ.
"""

import numpy as np

cimport cython
cimport numpy as cnp
from libc.math cimport floor, fabs, INFINITY

ctypedef fused floating:
    float
    double


def grid_sample_forward(floating[:, :, ::1] f, floating[:, ::1] pts):
    cdef Py_ssize_t c = f.shape[0], h = f.shape[1], w = f.shape[2]
    cdef Py_ssize_t p = pts.shape[0]
    dtype = np.float32 if floating is float else np.float64
    out_arr = np.zeros((c, p), dtype=dtype)
    cdef floating[:, ::1] out = out_arr
    cdef Py_ssize_t i, ci
    cdef floating x, y, fx, fy, w00, w10, w01, w11
    cdef Py_ssize_t x0, y0, x1, y1
    cdef bint v00, v10, v01, v11
    with nogil:
        for i in range(p):
            x = pts[i, 0]
            y = pts[i, 1]
            x0 = <Py_ssize_t>floor(x)
            y0 = <Py_ssize_t>floor(y)
            x1 = x0 + 1
            y1 = y0 + 1
            fx = x - <floating>x0
            fy = y - <floating>y0
            w00 = (1 - fx) * (1 - fy)
            w10 = fx * (1 - fy)
            w01 = (1 - fx) * fy
            w11 = fx * fy
            v00 = x0 >= 0 and x0 < w and y0 >= 0 and y0 < h
            v10 = x1 >= 0 and x1 < w and y0 >= 0 and y0 < h
            v01 = x0 >= 0 and x0 < w and y1 >= 0 and y1 < h
            v11 = x1 >= 0 and x1 < w and y1 >= 0 and y1 < h
            for ci in range(c):
                out[ci, i] = (
                    (f[ci, y0, x0] * w00 if v00 else 0)
                    + (f[ci, y0, x1] * w10 if v10 else 0)
                    + (f[ci, y1, x0] * w01 if v01 else 0)
                    + (f[ci, y1, x1] * w11 if v11 else 0)
                )
    return out_arr


def grid_sample_backward(floating[:, :, ::1] f, floating[:, ::1] pts, floating[:, ::1] gy, bint need_pts_grad):
    cdef Py_ssize_t c = f.shape[0], h = f.shape[1], w = f.shape[2]
    cdef Py_ssize_t p = pts.shape[0]
    dtype = np.float32 if floating is float else np.float64
    gf_arr = np.zeros((c, h, w), dtype=dtype)
    cdef floating[:, :, ::1] gf = gf_arr
    gpts_arr = np.zeros((p, 2), dtype=dtype) if need_pts_grad else None
    cdef floating[:, ::1] gpts
    if need_pts_grad:
        gpts = gpts_arr
    cdef Py_ssize_t i, ci
    cdef floating x, y, fx, fy, w00, w10, w01, w11, g, val00, val10, val01, val11, gx, gyy
    cdef Py_ssize_t x0, y0, x1, y1
    cdef bint v00, v10, v01, v11
    with nogil:
        for i in range(p):
            x = pts[i, 0]
            y = pts[i, 1]
            x0 = <Py_ssize_t>floor(x)
            y0 = <Py_ssize_t>floor(y)
            x1 = x0 + 1
            y1 = y0 + 1
            fx = x - <floating>x0
            fy = y - <floating>y0
            w00 = (1 - fx) * (1 - fy)
            w10 = fx * (1 - fy)
            w01 = (1 - fx) * fy
            w11 = fx * fy
            v00 = x0 >= 0 and x0 < w and y0 >= 0 and y0 < h
            v10 = x1 >= 0 and x1 < w and y0 >= 0 and y0 < h
            v01 = x0 >= 0 and x0 < w and y1 >= 0 and y1 < h
            v11 = x1 >= 0 and x1 < w and y1 >= 0 and y1 < h
            gx = 0
            gyy = 0
            for ci in range(c):
                g = gy[ci, i]
                val00 = f[ci, y0, x0] if v00 else 0
                val10 = f[ci, y0, x1] if v10 else 0
                val01 = f[ci, y1, x0] if v01 else 0
                val11 = f[ci, y1, x1] if v11 else 0
                if v00:
                    gf[ci, y0, x0] += g * w00
                if v10:
                    gf[ci, y0, x1] += g * w10
                if v01:
                    gf[ci, y1, x0] += g * w01
                if v11:
                    gf[ci, y1, x1] += g * w11
                if need_pts_grad:
                    gx += g * (-(1 - fy) * val00 + (1 - fy) * val10 - fy * val01 + fy * val11)
                    gyy += g * (-(1 - fx) * val00 - fx * val10 + (1 - fx) * val01 + fx * val11)
            if need_pts_grad:
                gpts[i, 0] = gx
                gpts[i, 1] = gyy
    return gf_arr, gpts_arr


def block_match(floating[:, ::1] it, floating[:, ::1] itau, cys, cxs, dxs, dys, int block):
    cdef Py_ssize_t h = it.shape[0], w = it.shape[1]
    cdef long[::1] cy = np.ascontiguousarray(cys, dtype=np.int64)
    cdef long[::1] cx = np.ascontiguousarray(cxs, dtype=np.int64)
    cdef long[::1] dxv = np.ascontiguousarray(dxs, dtype=np.int64)
    cdef long[::1] dyv = np.ascontiguousarray(dys, dtype=np.int64)
    cdef Py_ssize_t ny = cy.shape[0], nx = cx.shape[0], nd = dxv.shape[0]
    cdef Py_ssize_t half = block // 2
    out_arr = np.zeros((ny, nx, 2), dtype=np.float64)
    cdef double[:, :, ::1] out = out_arr
    cdef Py_ssize_t iy, ix, k, qy, qx, py, px
    cdef long dx, dy
    cdef double sad, best, cnt
    with nogil:
        for iy in range(ny):
            for ix in range(nx):
                best = INFINITY
                for k in range(nd):
                    dx = dxv[k]
                    dy = dyv[k]
                    sad = 0
                    cnt = 0
                    for qy in range(-half, half + 1):
                        py = cy[iy] + qy
                        if py < 0 or py >= h or py + dy < 0 or py + dy >= h:
                            continue
                        for qx in range(-half, half + 1):
                            px = cx[ix] + qx
                            if px < 0 or px >= w or px + dx < 0 or px + dx >= w:
                                continue
                            sad += fabs(<double>it[py, px] - <double>itau[py + dy, px + dx])
                            cnt += 1
                    if cnt > 0:
                        sad = sad / cnt
                    else:
                        sad = INFINITY
                    if sad < best:
                        best = sad
                        out[iy, ix, 0] = <double>dx
                        out[iy, ix, 1] = <double>dy
    return out_arr
