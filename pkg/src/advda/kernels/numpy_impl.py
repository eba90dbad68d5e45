"""Pure-numpy implementations of the conv/pool kernels.

Convolution goes through im2col and a single BLAS matmul; the input-gradient
scatter is a small loop over kernel offsets so no ``np.add.at`` is needed on
the hot path. Max pooling uses sliding windows and ``argmax``, which picks
the first maximum in row-major window order, matching the numba kernels'
tie rule.
"""

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view


def _windows(x, kh, kw, stride):
    win = sliding_window_view(x, (kh, kw), axis=(2, 3))
    return win[:, :, ::stride, ::stride]


def conv2d_forward(x, w, stride):
    n = x.shape[0]
    co, ci, kh, kw = w.shape
    win = _windows(x, kh, kw, stride)  # (n, ci, oh, ow, kh, kw)
    oh, ow = win.shape[2], win.shape[3]
    cols = win.transpose(0, 2, 3, 1, 4, 5).reshape(n * oh * ow, ci * kh * kw)
    y = cols @ w.reshape(co, -1).T
    return np.ascontiguousarray(y.reshape(n, oh, ow, co).transpose(0, 3, 1, 2))


def conv2d_backward(x, w, g, stride):
    n = x.shape[0]
    co, ci, kh, kw = w.shape
    oh, ow = g.shape[2], g.shape[3]

    win = _windows(x, kh, kw, stride)
    cols = win.transpose(0, 2, 3, 1, 4, 5).reshape(n * oh * ow, ci * kh * kw)
    gcols = np.ascontiguousarray(g.transpose(0, 2, 3, 1)).reshape(n * oh * ow, co)

    gw = (gcols.T @ cols).reshape(co, ci, kh, kw)

    gwin = (gcols @ w.reshape(co, -1)).reshape(n, oh, ow, ci, kh, kw)
    gwin = gwin.transpose(0, 3, 1, 2, 4, 5)  # (n, ci, oh, ow, kh, kw)
    gx = np.zeros_like(x)
    for ky in range(kh):
        for kx in range(kw):
            gx[:, :, ky : ky + stride * oh : stride, kx : kx + stride * ow : stride] += gwin[
                :, :, :, :, ky, kx
            ]
    return gx, gw


def maxpool_forward(x, ph, pw, stride):
    n, c, h, w = x.shape
    win = _windows(x, ph, pw, stride)  # (n, c, oh, ow, ph, pw)
    oh, ow = win.shape[2], win.shape[3]
    flat = win.reshape(n, c, oh, ow, ph * pw)
    arg = flat.argmax(axis=-1)  # first max in row-major window order
    out = np.take_along_axis(flat, arg[..., None], axis=-1)[..., 0]
    oy = np.arange(oh)[None, None, :, None] * stride
    ox = np.arange(ow)[None, None, None, :] * stride
    ay = (oy + arg // pw).astype(np.int32)
    ax = (ox + arg % pw).astype(np.int32)
    return np.ascontiguousarray(out), ay, ax


def maxpool_backward(g, ay, ax, h, w):
    n, c, oh, ow = g.shape
    gx = np.zeros((n, c, h, w))
    ii = np.arange(n)[:, None, None, None]
    cc = np.arange(c)[None, :, None, None]
    ii = np.broadcast_to(ii, g.shape)
    cc = np.broadcast_to(cc, g.shape)
    np.add.at(gx, (ii, cc, ay, ax), g)
    return gx
