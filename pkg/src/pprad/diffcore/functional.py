"""Forward and backward rules for every layer kind.

Tensors are ``(batch, channels, depth, height, width)`` numpy arrays; all
convolutions reduce to the stride-1 flat correlation in :mod:`.kernels`.
Strided convolutions are computed densely and subsampled, transposed
convolutions are the exact adjoint of that map.
"""

from itertools import product

import numpy as np

from ..errors import ShapeError
from . import kernels

SIGMA_FLOOR = 1e-12


def _check5(x, what="input"):
    if x.ndim != 5:
        raise ShapeError(f"{what} must be 5-D (batch, channels, d, h, w), got shape {x.shape}")


def _offsets(frame, k):
    P1, P2 = frame[1], frame[2]
    return np.array(
        [(a * P1 + b) * P2 + c for a, b, c in product(range(k[0]), range(k[1]), range(k[2]))],
        dtype=np.int64,
    )


def _pad(x, p):
    if p == 0:
        return x
    B, C, D, H, W = x.shape
    out = np.zeros((B, C, D + 2 * p, H + 2 * p, W + 2 * p), dtype=x.dtype)
    out[:, :, p:-p, p:-p, p:-p] = x
    return out


def _flat(x):
    return np.ascontiguousarray(x).reshape(x.shape[0], x.shape[1], -1)


def _frame_setup(frame, k):
    offs = _offsets(frame, k)
    L = int(np.prod(frame))
    return offs, L, L - int(offs[-1])


# below this many flat positions per sample, im2col + GEMM beats the
# streaming kernels (deep layers: tiny grids, many channels)
GEMM_MAX_POSITIONS = 32


def _im2col(xflat, offs, n):
    """(B, Ci, L) -> (B * n, Ci * T) matrix of shifted reads."""
    B, Ci = xflat.shape[:2]
    idx = np.arange(n)[:, None] + offs[None, :]
    cols = xflat[:, :, idx]  # (B, Ci, n, T)
    return cols.transpose(0, 2, 1, 3).reshape(B * n, Ci * offs.shape[0])


def _corr_flat(xflat, w, frame, n, out):
    """Dispatch on kernel and grid size; ``out`` is (B, Co, >= n)."""
    Co, Ci = w.shape[:2]
    w = np.ascontiguousarray(w, dtype=xflat.dtype)
    if n <= GEMM_MAX_POSITIONS:
        # stacked per-sample products keep each sample independent of batch size
        B = xflat.shape[0]
        cols = _im2col(xflat, _offsets(frame, w.shape[2:]), n).reshape(B, n, -1)
        out[:, :, :n] = np.matmul(cols, w.reshape(Co, -1).T).transpose(0, 2, 1)
    elif w.shape[2:] == (3, 3, 3):
        kernels.corr_forward_k3(xflat, w, frame[1], frame[2], n, out)
    else:
        kernels.corr_forward(xflat, w.reshape(Co, Ci, -1), _offsets(frame, w.shape[2:]), n, out)


def _corr_weight_grad(xflat, offs, n, gext, g0, gw):
    """gw (Co, Ci, T) += correlation of gradient and input over the frame."""
    if n <= GEMM_MAX_POSITIONS:
        B, Co = gext.shape[:2]
        G = gext[:, :, g0:g0 + n].transpose(0, 2, 1).reshape(B * n, Co)
        gw += (G.T @ _im2col(xflat, offs, n)).reshape(gw.shape)
    else:
        kernels.corr_backward_weight(xflat, offs, n, gext, g0, gw)


def _grad_frame(gy, frame, maxoff):
    """Zero tensor (B, C, maxoff + L) holding ``gy`` in the low corner of the
    frame that starts at ``maxoff``."""
    B, C = gy.shape[:2]
    L = int(np.prod(frame))
    ext = np.zeros((B, C, maxoff + L), dtype=gy.dtype)
    view = ext[:, :, maxoff:].reshape((B, C) + tuple(frame))
    view[:, :, : gy.shape[2], : gy.shape[3], : gy.shape[4]] = gy
    return ext


def _flip_transpose(w):
    return np.ascontiguousarray(w[:, :, ::-1, ::-1, ::-1].transpose(1, 0, 2, 3, 4))


def correlate(xpad, w, stride=1, bias=None):
    """Valid cross-correlation of ``xpad`` with ``w``, subsampled by ``stride``."""
    B, Ci = xpad.shape[:2]
    Co, wci = w.shape[:2]
    k = w.shape[2:]
    if wci != Ci:
        raise ShapeError(f"kernel expects {wci} input channels, got {Ci}")
    frame = xpad.shape[2:]
    dense = tuple(f - kk + 1 for f, kk in zip(frame, k))
    if min(dense) < 1:
        raise ShapeError(f"spatial size {frame} smaller than kernel {k}")
    offs, L, n = _frame_setup(frame, k)
    out = np.empty((B, Co, L), dtype=xpad.dtype)
    _corr_flat(_flat(xpad), w, frame, n, out)
    osz = tuple((d - 1) // stride + 1 for d in dense)
    y = np.empty((B, Co) + osz, dtype=xpad.dtype)
    if bias is None:
        bias = np.zeros(Co, dtype=xpad.dtype)
    kernels.crop_bias(out.reshape((B, Co) + tuple(frame)), *osz, stride, bias.astype(xpad.dtype), y)
    return y


def correlate_backward(xpad, w, g, need_input=True):
    """Gradients of the dense (stride-1) :func:`correlate` w.r.t. input and kernel."""
    B, Ci = xpad.shape[:2]
    Co = w.shape[0]
    frame = xpad.shape[2:]
    offs, L, n = _frame_setup(frame, w.shape[2:])
    maxoff = int(offs[-1])
    gext = _grad_frame(g, frame, maxoff)
    gw = np.zeros((Co, Ci, offs.shape[0]), dtype=xpad.dtype)
    _corr_weight_grad(_flat(xpad), offs, n, gext, maxoff, gw)
    gx = None
    if need_input:
        gx = np.empty((B, Ci, L), dtype=xpad.dtype)
        _corr_flat(gext, _flip_transpose(w), frame, L, gx)
        gx = gx.reshape(xpad.shape)
    return gx, gw.reshape(w.shape)


def conv_output_size(size, k, stride, padding):
    return (size + 2 * padding - k) // stride + 1


def conv3d_forward(x, kernel, bias, stride=1, padding=0):
    """3-D cross-correlation with symmetric zero padding and stride."""
    _check5(x)
    if kernel.ndim != 5:
        raise ShapeError(f"kernel must be 5-D, got shape {kernel.shape}")
    if kernel.shape[1] != x.shape[1]:
        raise ShapeError(f"kernel expects {kernel.shape[1]} input channels, got {x.shape[1]}")
    return correlate(_pad(x, padding), kernel, stride, bias)


def conv3d_backward(x, kernel, gy, stride=1, padding=0, need_input=True):
    """Returns ``(grad_input, grad_kernel, grad_bias)``; grad_input is None if not needed."""
    xpad = _pad(x, padding)
    dense = tuple(f - k + 1 for f, k in zip(xpad.shape[2:], kernel.shape[2:]))
    if stride > 1:
        g = np.zeros(gy.shape[:2] + dense, dtype=gy.dtype)
        g[:, :, ::stride, ::stride, ::stride] = gy
    else:
        g = gy
    gxpad, gw = correlate_backward(xpad, kernel, g, need_input)
    gx = None
    if need_input:
        gx = gxpad
        if padding:
            p = padding
            gx = gxpad[:, :, p:-p, p:-p, p:-p].copy()
    return gx, gw, gy.sum(axis=(0, 2, 3, 4))


def _transp_frame(x, kernel, stride):
    k = kernel.shape[2]
    return tuple((s - 1) * stride + k for s in x.shape[2:])


def _zero_insert(x, frame, stride):
    z = np.zeros(x.shape[:2] + tuple(frame), dtype=x.dtype)
    z[:, :, : (x.shape[2] - 1) * stride + 1 : stride, : (x.shape[3] - 1) * stride + 1 : stride,
      : (x.shape[4] - 1) * stride + 1 : stride] = x
    return z


def transp_conv3d_forward(x, kernel, bias, stride=1, padding=0):
    """Transposed convolution; ``kernel`` has shape (in_channels, out_channels, k, k, k).

    Output side is ``(in - 1) * stride - 2 * padding + k``; k=4, s=2, p=1 doubles.
    """
    _check5(x)
    if kernel.ndim != 5 or kernel.shape[0] != x.shape[1]:
        raise ShapeError(f"transposed kernel {kernel.shape} incompatible with input channels {x.shape[1]}")
    B = x.shape[0]
    Cout = kernel.shape[1]
    frame = _transp_frame(x, kernel, stride)
    if min(f - 2 * padding for f in frame) < 1:
        raise ShapeError("transposed convolution output would be empty")
    offs, L, n = _frame_setup(frame, kernel.shape[2:])
    maxoff = int(offs[-1])
    # adjoint of the dense correlation: scatter == correlate the front-padded
    # zero-inserted input with the flipped kernel
    zext = _grad_frame(_zero_insert(x, frame, stride)[:, :, : frame[0] - kernel.shape[2] + 1,
                                                         : frame[1] - kernel.shape[3] + 1,
                                                         : frame[2] - kernel.shape[4] + 1], frame, maxoff)
    out = np.empty((B, Cout, L), dtype=x.dtype)
    _corr_flat(zext, _flip_transpose(kernel), frame, L, out)
    out = out.reshape((B, Cout) + frame)
    if padding:
        p = padding
        out = out[:, :, p:-p, p:-p, p:-p]
    out = np.ascontiguousarray(out)
    if bias is not None:
        out += bias.reshape(1, -1, 1, 1, 1).astype(out.dtype)
    return out


def transp_conv3d_backward(x, kernel, gy, stride=1, padding=0, need_input=True):
    Cin, Cout = kernel.shape[:2]
    frame = _transp_frame(x, kernel, stride)
    offs, L, n = _frame_setup(frame, kernel.shape[2:])
    maxoff = int(offs[-1])
    gfull = _pad(gy, padding)
    zext = _grad_frame(x if stride == 1 else _zero_insert(x, frame, stride)[
        :, :, : frame[0] - kernel.shape[2] + 1, : frame[1] - kernel.shape[3] + 1,
        : frame[2] - kernel.shape[4] + 1], frame, maxoff)
    gw = np.zeros((Cin, Cout, offs.shape[0]), dtype=x.dtype)
    _corr_weight_grad(_flat(gfull), offs, n, zext, maxoff, gw)
    gx = None
    if need_input:
        gx = correlate(gfull, kernel, stride)[:, :, : x.shape[2], : x.shape[3], : x.shape[4]].copy()
    return gx, gw.reshape(kernel.shape), gy.sum(axis=(0, 2, 3, 4))


def avg_pool_forward(x):
    """Kernel-2 stride-2 average pooling; a trailing odd plane is dropped."""
    _check5(x)
    B, C, D, H, W = x.shape
    if min(D, H, W) < 2:
        raise ShapeError(f"average pooling needs spatial dims >= 2, got {(D, H, W)}")
    d, h, w = D // 2, H // 2, W // 2
    v = x[:, :, : 2 * d, : 2 * h, : 2 * w].reshape(B, C, d, 2, h, 2, w, 2)
    return v.mean(axis=(3, 5, 7))


def avg_pool_backward(x_shape, gy):
    B, C, D, H, W = x_shape
    d, h, w = gy.shape[2:]
    gx = np.zeros(x_shape, dtype=gy.dtype)
    g = np.broadcast_to((gy / 8)[:, :, :, None, :, None, :, None], (B, C, d, 2, h, 2, w, 2))
    gx[:, :, : 2 * d, : 2 * h, : 2 * w] = g.reshape(B, C, 2 * d, 2 * h, 2 * w)
    return gx


def global_avg_pool_forward(x):
    _check5(x)
    return x.mean(axis=(2, 3, 4), keepdims=True)


def global_avg_pool_backward(x_shape, gy):
    count = x_shape[2] * x_shape[3] * x_shape[4]
    return np.broadcast_to(gy / count, x_shape).copy()


def leaky_relu_forward(x, alpha=0.2):
    x = np.ascontiguousarray(x)
    out = np.empty_like(x)
    kernels.leaky_relu(x, x.dtype.type(alpha), out)
    return out


def leaky_relu_backward(x, gy, alpha=0.2):
    x = np.ascontiguousarray(x)
    gy = np.ascontiguousarray(gy, dtype=x.dtype)
    out = np.empty_like(x)
    kernels.leaky_relu_grad(x, gy, x.dtype.type(alpha), out)
    return out


def sigmoid_forward(x):
    # split by sign so exp never overflows
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    e = np.exp(x[~pos])
    out[~pos] = e / (1.0 + e)
    return out


def sigmoid_backward(y, gy):
    return gy * y * (1 - y)


def affine_forward(x, weight, bias):
    """``x`` is flattened to (batch, features) and mapped to ``x @ weight + bias``."""
    x2 = x.reshape(x.shape[0], -1)
    if x2.shape[1] != weight.shape[0]:
        raise ShapeError(f"affine expects {weight.shape[0]} features, got {x2.shape[1]}")
    return np.matmul(x2[:, None, :], weight)[:, 0] + bias


def affine_backward(x, weight, gy):
    x2 = x.reshape(x.shape[0], -1)
    gx = (gy @ weight.T).reshape(x.shape)
    return gx, x2.T @ gy, gy.sum(axis=0)


def spectral_normalize(weight, u, n_iters=1, eps=SIGMA_FLOOR):
    """Divide ``weight`` by its power-iteration estimate of the top singular value.

    The weight is viewed as an (out_channels, rest) matrix. Returns
    ``(normalized_weight, updated_u, sigma)``; sigma is floored at ``eps``
    so an all-zero weight comes back unchanged instead of dividing by zero.
    """
    if n_iters < 1:
        raise ValueError("n_iters must be >= 1")
    W = weight.reshape(weight.shape[0], -1)
    u = np.asarray(u, dtype=W.dtype)
    for _ in range(n_iters):
        v = W.T @ u
        v = v / max(np.linalg.norm(v), eps)
        u = W @ v
        u = u / max(np.linalg.norm(u), eps)
    sigma = max(float(u @ (W @ v)), eps)
    return weight / weight.dtype.type(sigma), u, sigma
