"""Convolution via im2col + BLAS matmul, shared by both kernel backends.

Dense GEMM is the one inner loop numpy/BLAS already does better than any
hand-rolled loop here, so there is no compiled variant of these three.
"""

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view


def im2col(x, kh, kw, stride, pad):
    """Column matrix [Ho*Wo, Cin*kh*kw] of sliding windows (copies once)."""
    xp = np.pad(x, ((0, 0), (pad, pad), (pad, pad)))
    win = sliding_window_view(xp, (kh, kw), axis=(1, 2))[:, ::stride, ::stride]
    ho, wo = win.shape[1], win.shape[2]
    cin = x.shape[0]
    return win.transpose(1, 2, 0, 3, 4).reshape(ho * wo, cin * kh * kw), ho, wo


def forward_from_cols(cols, ho, wo, w, b):
    cout = w.shape[0]
    y = cols @ w.reshape(cout, -1).T
    if b is not None:
        y = y + b
    return np.ascontiguousarray(y.T.reshape(cout, ho, wo))


def backward_weight_from_cols(gy, cols, w_shape):
    cout = w_shape[0]
    gw = gy.reshape(cout, -1) @ cols
    return np.ascontiguousarray(gw.reshape(w_shape))


def conv2d_forward(x, w, b, stride, pad):
    cols, ho, wo = im2col(x, w.shape[2], w.shape[3], stride, pad)
    return forward_from_cols(cols, ho, wo, w, b)


def conv2d_backward_weight(gy, x, w_shape, stride, pad):
    cols, _, _ = im2col(x, w_shape[2], w_shape[3], stride, pad)
    return backward_weight_from_cols(gy, cols, w_shape)


def conv2d_backward_input(gy, w, in_hw, stride, pad):
    h, wid = in_hw
    cout, cin, kh, kw = w.shape
    ho, wo = gy.shape[1], gy.shape[2]
    gcols = gy.reshape(cout, ho * wo).T @ w.reshape(cout, -1)
    gcols = gcols.reshape(ho, wo, cin, kh, kw)
    gxp = np.zeros((cin, h + 2 * pad, wid + 2 * pad), dtype=gy.dtype)
    for ky in range(kh):
        for kx in range(kw):
            gxp[:, ky : ky + (ho - 1) * stride + 1 : stride,
                kx : kx + (wo - 1) * stride + 1 : stride] += gcols[:, :, :, ky, kx].transpose(2, 0, 1)
    if pad:
        gxp = gxp[:, pad:-pad, pad:-pad]
    return np.ascontiguousarray(gxp)
