"""Flat-frame stride-1 correlation kernels.

Inputs are padded tensors flattened to ``(B, C, L)``.  An output position
``p`` in the same flat frame reads the input at ``p + offs[t]`` for each
kernel tap ``t``; positions whose window wraps a row or plane edge are junk
and get cropped by the caller, and gradients at junk positions must be
zero.  Long contiguous inner loops are what let LLVM vectorise these, a
direct six-deep loop does not.

The input gradient is a forward correlation of the (front-padded) output
gradient with the flipped, channel-transposed kernel, so only the forward
and weight-gradient kernels exist here.
"""

import numpy as np
from numba import njit

_TILE = 256


@njit(fastmath=True, cache=True)
def corr_forward(x, w, offs, n, out):
    """out[b, co, p] = sum_{ci, t} w[co, ci, t] * x[b, ci, p + offs[t]] for p < n."""
    B, Ci = x.shape[0], x.shape[1]
    Co, T = w.shape[0], w.shape[2]
    acc = np.empty((Co, _TILE), x.dtype)
    for b in range(B):
        for p0 in range(0, n, _TILE):
            m = min(_TILE, n - p0)
            acc[:, :] = 0
            for ci in range(Ci):
                xx = x[b, ci]
                for t in range(T):
                    xs = xx[p0 + offs[t]:p0 + offs[t] + m]
                    for co in range(Co):
                        wv = w[co, ci, t]
                        a = acc[co]
                        for j in range(m):
                            a[j] += wv * xs[j]
            for co in range(Co):
                o = out[b, co, p0:p0 + m]
                a = acc[co]
                for j in range(m):
                    o[j] = a[j]


@njit(fastmath=True, cache=True)
def corr_forward_k3(x, w, P1, P2, n, out):
    """:func:`corr_forward` specialised to 3x3x3 kernels in a frame with row
    length ``P2`` and plane size ``P1 * P2``; ``w`` is (Co, Ci, 3, 3, 3)."""
    B, Ci = x.shape[0], x.shape[1]
    Co = w.shape[0]
    for b in range(B):
        for co in range(Co):
            o = out[b, co, :n]
            o[:] = 0
            for ci in range(Ci):
                for kz in range(3):
                    base = kz * P1 * P2
                    xs = x[b, ci, base:base + n + 2 * P2 + 2]
                    a0 = xs[0:n]
                    a1 = xs[1:n + 1]
                    a2 = xs[2:n + 2]
                    b0 = xs[P2:P2 + n]
                    b1 = xs[P2 + 1:P2 + n + 1]
                    b2 = xs[P2 + 2:P2 + n + 2]
                    c0 = xs[2 * P2:2 * P2 + n]
                    c1 = xs[2 * P2 + 1:2 * P2 + n + 1]
                    c2 = xs[2 * P2 + 2:2 * P2 + n + 2]
                    w00 = w[co, ci, kz, 0, 0]
                    w01 = w[co, ci, kz, 0, 1]
                    w02 = w[co, ci, kz, 0, 2]
                    w10 = w[co, ci, kz, 1, 0]
                    w11 = w[co, ci, kz, 1, 1]
                    w12 = w[co, ci, kz, 1, 2]
                    w20 = w[co, ci, kz, 2, 0]
                    w21 = w[co, ci, kz, 2, 1]
                    w22 = w[co, ci, kz, 2, 2]
                    for p in range(n):
                        o[p] += (w00 * a0[p] + w01 * a1[p] + w02 * a2[p]
                                 + w10 * b0[p] + w11 * b1[p] + w12 * b2[p]
                                 + w20 * c0[p] + w21 * c1[p] + w22 * c2[p])


@njit(cache=True)
def corr_backward_weight(x, offs, n, g, g0, gw):
    """gw[co, ci, t] += sum_{b, p < n} g[b, co, g0 + p] * x[b, ci, p + offs[t]]."""
    B, Ci = x.shape[0], x.shape[1]
    Co, T = g.shape[1], offs.shape[0]
    for b in range(B):
        for co in range(Co):
            gg = g[b, co, g0:g0 + n]
            for ci in range(Ci):
                xx = x[b, ci]
                for t in range(T):
                    gw[co, ci, t] += np.dot(gg, xx[offs[t]:offs[t] + n])


@njit(fastmath=True, cache=True)
def leaky_relu(x, alpha, out):
    xf = x.reshape(-1)
    of = out.reshape(-1)
    for i in range(xf.shape[0]):
        v = xf[i]
        of[i] = v if v > 0 else alpha * v


@njit(fastmath=True, cache=True)
def leaky_relu_grad(x, gy, alpha, out):
    xf = x.reshape(-1)
    gf = gy.reshape(-1)
    of = out.reshape(-1)
    for i in range(xf.shape[0]):
        of[i] = gf[i] if xf[i] > 0 else alpha * gf[i]


@njit(fastmath=True, cache=True)
def crop_bias(full, o0, o1, o2, stride, bias, out):
    """out[b, c, i, j, k] = full[b, c, s*i, s*j, s*k] + bias[c]."""
    B, C = out.shape[0], out.shape[1]
    for b in range(B):
        for c in range(C):
            bv = bias[c]
            for i in range(o0):
                for j in range(o1):
                    src = full[b, c, stride * i, stride * j]
                    dst = out[b, c, i, j]
                    for k in range(o2):
                        dst[k] = src[stride * k] + bv
