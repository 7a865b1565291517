"""Brute-force reference implementations used only by the tests.

These are deliberately naive (explicit loops, no shared code with the
package) so that agreement is evidence of correctness.
"""

import itertools
import math

import numpy as np


def conv3d(x, w, b, stride=1, padding=0):
    B, Ci, D, H, W_ = x.shape
    Co, _, k, _, _ = w.shape
    xp = np.zeros((B, Ci, D + 2 * padding, H + 2 * padding, W_ + 2 * padding))
    xp[:, :, padding:padding + D, padding:padding + H, padding:padding + W_] = x
    od = (D + 2 * padding - k) // stride + 1
    oh = (H + 2 * padding - k) // stride + 1
    ow = (W_ + 2 * padding - k) // stride + 1
    out = np.zeros((B, Co, od, oh, ow))
    for n in range(B):
        for co in range(Co):
            for i in range(od):
                for j in range(oh):
                    for l in range(ow):
                        acc = b[co]
                        for ci in range(Ci):
                            for a in range(k):
                                for c in range(k):
                                    for e in range(k):
                                        acc += w[co, ci, a, c, e] * xp[n, ci, i * stride + a, j * stride + c, l * stride + e]
                        out[n, co, i, j, l] = acc
    return out


def transp_conv3d(x, w, b, stride=1, padding=0):
    """Scatter form: every input voxel paints a weighted kernel copy."""
    B, Ci, D, H, W_ = x.shape
    _, Co, k, _, _ = w.shape
    full = np.zeros((B, Co, (D - 1) * stride + k, (H - 1) * stride + k, (W_ - 1) * stride + k))
    for n in range(B):
        for ci in range(Ci):
            for i in range(D):
                for j in range(H):
                    for l in range(W_):
                        v = x[n, ci, i, j, l]
                        full[n, :, i * stride:i * stride + k, j * stride:j * stride + k,
                             l * stride:l * stride + k] += v * w[ci]
    p = padding
    out = full[:, :, p:full.shape[2] - p, p:full.shape[3] - p, p:full.shape[4] - p]
    return out + np.asarray(b).reshape(1, -1, 1, 1, 1)


def avg_pool(x):
    B, C, D, H, W_ = x.shape
    out = np.zeros((B, C, D // 2, H // 2, W_ // 2))
    for n, c in itertools.product(range(B), range(C)):
        for i in range(D // 2):
            for j in range(H // 2):
                for l in range(W_ // 2):
                    s = 0.0
                    for a, bb, e in itertools.product(range(2), repeat=3):
                        s += x[n, c, 2 * i + a, 2 * j + bb, 2 * l + e]
                    out[n, c, i, j, l] = s / 8
    return out


def global_avg_pool(x):
    B, C = x.shape[:2]
    out = np.zeros((B, C, 1, 1, 1))
    for n in range(B):
        for c in range(C):
            s = 0.0
            cnt = 0
            for v in x[n, c].ravel():
                s += v
                cnt += 1
            out[n, c, 0, 0, 0] = s / cnt
    return out


def _neighbourhood(a, i, j, l, k):
    h = k // 2
    D, H, W_ = a.shape
    vals = []
    for di in range(-h, h + 1):
        for dj in range(-h, h + 1):
            for dl in range(-h, h + 1):
                ii = min(max(i + di, 0), D - 1)
                jj = min(max(j + dj, 0), H - 1)
                ll = min(max(l + dl, 0), W_ - 1)
                vals.append(a[ii, jj, ll])
    return vals


def median_filter(a, k):
    out = np.zeros_like(a)
    for i, j, l in itertools.product(*map(range, a.shape)):
        vals = sorted(_neighbourhood(a, i, j, l, k))
        out[i, j, l] = vals[len(vals) // 2]
    return out


def min_filter(a, k):
    out = np.zeros_like(a)
    for i, j, l in itertools.product(*map(range, a.shape)):
        out[i, j, l] = min(_neighbourhood(a, i, j, l, k))
    return out


def pairwise_auroc(scores, labels):
    pos = [s for s, y in zip(scores, labels) if y]
    neg = [s for s, y in zip(scores, labels) if not y]
    total = 0.0
    for p in pos:
        for q in neg:
            total += 1.0 if p > q else 0.5 if p == q else 0.0
    return total / (len(pos) * len(neg))


def fleiss_kappa(table):
    """Item-by-item textbook formula with plain Python arithmetic."""
    N = len(table)
    n = sum(table[0])
    k = len(table[0])
    P = []
    for row in table:
        P.append((sum(c * c for c in row) - n) / (n * (n - 1)))
    P_bar = sum(P) / N
    p = [sum(row[j] for row in table) / (N * n) for j in range(k)]
    P_e = sum(q * q for q in p)
    return (P_bar - P_e) / (1 - P_e)


def trilinear(data, target):
    """Per-voxel trilinear interpolation of ``data[z, y, x]`` onto ``target`` (z, y, x) dims."""
    src = data.shape
    out = np.zeros(target)
    for idx in itertools.product(*map(range, target)):
        pos = [i * (s - 1) / (t - 1) for i, s, t in zip(idx, src, target)]
        lo = [min(int(math.floor(p)), s - 2) for p, s in zip(pos, src)]
        fr = [p - l for p, l in zip(pos, lo)]
        acc = 0.0
        for corner in itertools.product((0, 1), repeat=3):
            wgt = 1.0
            for c, f in zip(corner, fr):
                wgt *= f if c else 1 - f
            acc += wgt * data[lo[0] + corner[0], lo[1] + corner[1], lo[2] + corner[2]]
        out[idx] = acc
    return out


def sorted_percentile(values, q):
    """Linear interpolation between closest ranks on a full sort."""
    v = sorted(float(x) for x in values)
    pos = (len(v) - 1) * q / 100
    lo = int(math.floor(pos))
    hi = min(lo + 1, len(v) - 1)
    return v[lo] + (v[hi] - v[lo]) * (pos - lo)


def rank_cdf(values, reference):
    """Fraction of reference values <= each value (unbinned empirical CDF)."""
    ref = sorted(reference)
    out = []
    for v in values:
        lo, hi = 0, len(ref)
        while lo < hi:
            mid = (lo + hi) // 2
            if ref[mid] <= v:
                lo = mid + 1
            else:
                hi = mid
        out.append(lo / len(ref))
    return np.array(out)


def adam_scalar(grads, lr=1e-3, b1=0.9, b2=0.999, eps=1e-8, theta=0.0):
    m = v = 0.0
    for t, g in enumerate(grads, 1):
        m = b1 * m + (1 - b1) * g
        v = b2 * v + (1 - b2) * g * g
        mh = m / (1 - b1 ** t)
        vh = v / (1 - b2 ** t)
        theta -= lr * mh / (math.sqrt(vh) + eps)
    return theta
