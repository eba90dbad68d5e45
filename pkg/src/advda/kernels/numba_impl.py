"""Numba implementations of the conv/pool kernels.

Serial loops only: no ``parallel=True``, no ``fastmath``. Reductions run in a
fixed order so repeated calls are bit-identical. ``cache=True`` persists the
compiled kernels across processes.
"""

import numpy as np
from numba import njit


@njit(cache=True)
def conv2d_forward(x, w, stride):
    n, ci, h, wd = x.shape
    co, _, kh, kw = w.shape
    oh = (h - kh) // stride + 1
    ow = (wd - kw) // stride + 1
    out = np.zeros((n, co, oh, ow))
    # weight scalar hoisted, innermost loop contiguous in the output row
    for i in range(n):
        for oc in range(co):
            for ic in range(ci):
                for ky in range(kh):
                    for kx in range(kw):
                        wv = w[oc, ic, ky, kx]
                        for oy in range(oh):
                            iy = oy * stride + ky
                            for ox in range(ow):
                                out[i, oc, oy, ox] += wv * x[i, ic, iy, ox * stride + kx]
    return out


@njit(cache=True)
def conv2d_backward(x, w, g, stride):
    n, ci, h, wd = x.shape
    co, _, kh, kw = w.shape
    oh = g.shape[2]
    ow = g.shape[3]
    gx = np.zeros_like(x)
    gw = np.zeros_like(w)
    for i in range(n):
        for oc in range(co):
            for ic in range(ci):
                for ky in range(kh):
                    for kx in range(kw):
                        wv = w[oc, ic, ky, kx]
                        acc = 0.0
                        for oy in range(oh):
                            iy = oy * stride + ky
                            for ox in range(ow):
                                gv = g[i, oc, oy, ox]
                                gx[i, ic, iy, ox * stride + kx] += gv * wv
                                acc += gv * x[i, ic, iy, ox * stride + kx]
                        gw[oc, ic, ky, kx] += acc
    return gx, gw


@njit(cache=True)
def maxpool_forward(x, ph, pw, stride):
    n, c, h, w = x.shape
    oh = (h - ph) // stride + 1
    ow = (w - pw) // stride + 1
    out = np.empty((n, c, oh, ow))
    ay = np.empty((n, c, oh, ow), dtype=np.int32)
    ax = np.empty((n, c, oh, ow), dtype=np.int32)
    for i in range(n):
        for cc in range(c):
            for oy in range(oh):
                iy = oy * stride
                for ox in range(ow):
                    ix = ox * stride
                    best = x[i, cc, iy, ix]
                    by = iy
                    bx = ix
                    for ky in range(ph):
                        for kx in range(pw):
                            v = x[i, cc, iy + ky, ix + kx]
                            if v > best:  # strict: first max wins on ties
                                best = v
                                by = iy + ky
                                bx = ix + kx
                    out[i, cc, oy, ox] = best
                    ay[i, cc, oy, ox] = by
                    ax[i, cc, oy, ox] = bx
    return out, ay, ax


@njit(cache=True)
def maxpool_backward(g, ay, ax, h, w):
    n, c, oh, ow = g.shape
    gx = np.zeros((n, c, h, w))
    for i in range(n):
        for cc in range(c):
            for oy in range(oh):
                for ox in range(ow):
                    gx[i, cc, ay[i, cc, oy, ox], ax[i, cc, oy, ox]] += g[i, cc, oy, ox]
    return gx
