"""Layer modules, parameter storage and reverse-mode backward.

Each module caches whatever its backward rule needs during a recorded
forward pass; calling backward without one raises :class:`StateError`.
Blocks are compositions of primitive modules, so the tape is simply the
module tree plus the per-module caches.
"""

from collections import OrderedDict
from dataclasses import dataclass, field

import numpy as np

from ..errors import ConfigError, ShapeError, StateError
from . import functional as F


@dataclass
class Parameter:
    value: np.ndarray
    grad: np.ndarray = None

    def __post_init__(self):
        if self.grad is None:
            self.grad = np.zeros_like(self.value)


@dataclass
class ParamStore:
    """Named trainable tensors plus non-trainable buffers (spectral-norm ``u``)."""

    params: "OrderedDict[str, Parameter]" = field(default_factory=OrderedDict)
    buffers: "OrderedDict[str, np.ndarray]" = field(default_factory=OrderedDict)

    def __iter__(self):
        return iter(self.params.items())

    def __len__(self):
        return len(self.params)

    def grads(self):
        return OrderedDict((k, p.grad) for k, p in self.params.items())

    def zero_grad(self):
        for p in self.params.values():
            p.grad[...] = 0

    def astype(self, dtype):
        for p in self.params.values():
            p.value = p.value.astype(dtype)
            p.grad = np.zeros_like(p.value)
        for k in self.buffers:
            self.buffers[k] = self.buffers[k].astype(dtype)


def glorot_uniform(rng, shape, fan_in, fan_out, dtype):
    bound = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-bound, bound, size=shape).astype(dtype)


class Module:
    training = True

    def children(self):
        return []

    def register(self, store, prefix, rng, dtype):
        for i, child in enumerate(self.children()):
            child.register(store, f"{prefix}{i}.", rng, dtype)

    def train(self, mode=True):
        self.training = mode
        for c in self.children():
            c.train(mode)
        return self

    def eval(self):
        return self.train(False)

    def modules(self):
        yield self
        for c in self.children():
            yield from c.modules()

    def output_shape(self, shape):
        for c in self.children():
            shape = c.output_shape(shape)
        return shape

    def forward(self, x, record=False):
        raise NotImplementedError

    def backward(self, gy, need_input=True):
        raise NotImplementedError

    def _tape(self):
        cache = getattr(self, "_cache", None)
        if cache is None:
            raise StateError(f"{type(self).__name__}.backward called without a recorded forward pass")
        return cache

    def __call__(self, x, record=False):
        return self.forward(x, record)


class Conv3d(Module):
    """Conv(c, k, s) with symmetric zero padding and optional spectral normalization."""

    def __init__(self, in_ch, out_ch, k, stride=1, padding=0, spectral_norm=False, sn_iters=1):
        if min(in_ch, out_ch, k, stride) < 1 or padding < 0:
            raise ConfigError(f"invalid conv spec c_in={in_ch} c={out_ch} k={k} s={stride} p={padding}")
        self.in_ch, self.out_ch, self.k, self.stride, self.padding = in_ch, out_ch, k, stride, padding
        self.spectral_norm, self.sn_iters = spectral_norm, sn_iters
        self.frozen_sigma = None
        self._cache = None

    def register(self, store, prefix, rng, dtype):
        k3 = self.k ** 3
        shape = (self.out_ch, self.in_ch, self.k, self.k, self.k)
        self.w = store.params[prefix + "weight"] = Parameter(
            glorot_uniform(rng, shape, self.in_ch * k3, self.out_ch * k3, dtype))
        self.b = store.params[prefix + "bias"] = Parameter(np.zeros(self.out_ch, dtype))
        self._store, self._u_key = store, None
        if self.spectral_norm:
            u = rng.standard_normal(self.out_ch)
            self._u_key = prefix + "sn_u"
            store.buffers[self._u_key] = (u / np.linalg.norm(u)).astype(dtype)

    def effective_weight(self):
        w = self.w.value
        if not self.spectral_norm:
            return w, 1.0
        if self.frozen_sigma is not None:
            return w / w.dtype.type(self.frozen_sigma), self.frozen_sigma
        wn, u, sigma = F.spectral_normalize(w, self._store.buffers[self._u_key], self.sn_iters)
        if self.training:
            self._store.buffers[self._u_key] = u.astype(w.dtype)
        return wn, sigma

    def output_shape(self, shape):
        c, *sp = shape
        if c != self.in_ch:
            raise ShapeError(f"conv expects {self.in_ch} channels, got {c}")
        out = [F.conv_output_size(s, self.k, self.stride, self.padding) for s in sp]
        if min(out) < 1:
            raise ShapeError(f"conv k={self.k} s={self.stride} p={self.padding} empties spatial size {tuple(sp)}")
        return (self.out_ch, *out)

    def forward(self, x, record=False):
        w, sigma = self.effective_weight()
        y = F.conv3d_forward(x, w, self.b.value, self.stride, self.padding)
        self._cache = (x, w, sigma) if record else None
        return y

    def backward(self, gy, need_input=True):
        x, w, sigma = self._tape()
        gx, gw, gb = F.conv3d_backward(x, w, gy, self.stride, self.padding, need_input)
        # sigma is held constant through backward
        self.w.grad += gw / w.dtype.type(sigma)
        self.b.grad += gb
        self._cache = None
        return gx


class TransposedConv3d(Module):
    def __init__(self, in_ch, out_ch, k, stride=1, padding=0):
        if min(in_ch, out_ch, k, stride) < 1 or padding < 0:
            raise ConfigError(f"invalid transposed conv spec c_in={in_ch} c={out_ch} k={k} s={stride}")
        self.in_ch, self.out_ch, self.k, self.stride, self.padding = in_ch, out_ch, k, stride, padding
        self._cache = None

    def register(self, store, prefix, rng, dtype):
        k3 = self.k ** 3
        shape = (self.in_ch, self.out_ch, self.k, self.k, self.k)
        self.w = store.params[prefix + "weight"] = Parameter(
            glorot_uniform(rng, shape, self.in_ch * k3, self.out_ch * k3, dtype))
        self.b = store.params[prefix + "bias"] = Parameter(np.zeros(self.out_ch, dtype))

    def output_shape(self, shape):
        c, *sp = shape
        if c != self.in_ch:
            raise ShapeError(f"transposed conv expects {self.in_ch} channels, got {c}")
        return (self.out_ch, *[(s - 1) * self.stride - 2 * self.padding + self.k for s in sp])

    def forward(self, x, record=False):
        y = F.transp_conv3d_forward(x, self.w.value, self.b.value, self.stride, self.padding)
        self._cache = x if record else None
        return y

    def backward(self, gy, need_input=True):
        x = self._tape()
        gx, gw, gb = F.transp_conv3d_backward(x, self.w.value, gy, self.stride, self.padding, need_input)
        self.w.grad += gw
        self.b.grad += gb
        self._cache = None
        return gx


class AvgPool3d(Module):
    def __init__(self):
        self._cache = None

    def output_shape(self, shape):
        c, *sp = shape
        if min(sp) < 2:
            raise ShapeError(f"average pooling needs spatial dims >= 2, got {tuple(sp)}")
        return (c, *[s // 2 for s in sp])

    def forward(self, x, record=False):
        self._cache = x.shape if record else None
        return F.avg_pool_forward(x)

    def backward(self, gy, need_input=True):
        return F.avg_pool_backward(self._tape(), gy)


class GlobalAvgPool3d(Module):
    def __init__(self):
        self._cache = None

    def output_shape(self, shape):
        return (shape[0], 1, 1, 1)

    def forward(self, x, record=False):
        self._cache = x.shape if record else None
        return F.global_avg_pool_forward(x)

    def backward(self, gy, need_input=True):
        return F.global_avg_pool_backward(self._tape(), gy)


class LeakyReLU(Module):
    def __init__(self, alpha=0.2):
        if not 0 < alpha < 1:
            raise ConfigError(f"leaky relu slope must be in (0, 1), got {alpha}")
        self.alpha = alpha
        self._cache = None

    def output_shape(self, shape):
        return shape

    def forward(self, x, record=False):
        self._cache = x if record else None
        return F.leaky_relu_forward(x, self.alpha)

    def backward(self, gy, need_input=True):
        return F.leaky_relu_backward(self._tape(), gy, self.alpha)


class Sigmoid(Module):
    def __init__(self):
        self._cache = None

    def output_shape(self, shape):
        return shape

    def forward(self, x, record=False):
        y = F.sigmoid_forward(x)
        self._cache = y if record else None
        return y

    def backward(self, gy, need_input=True):
        return F.sigmoid_backward(self._tape(), gy)


class Affine(Module):
    """Linear(n): flattens its input and applies ``x @ W + b``."""

    def __init__(self, in_features, out_features):
        self.in_features, self.out_features = in_features, out_features
        self._cache = None

    def register(self, store, prefix, rng, dtype):
        self.w = store.params[prefix + "weight"] = Parameter(
            glorot_uniform(rng, (self.in_features, self.out_features), self.in_features, self.out_features, dtype))
        self.b = store.params[prefix + "bias"] = Parameter(np.zeros(self.out_features, dtype))

    def output_shape(self, shape):
        if int(np.prod(shape)) != self.in_features:
            raise ShapeError(f"affine expects {self.in_features} features, got shape {shape}")
        return (self.out_features,)

    def forward(self, x, record=False):
        self._cache = x if record else None
        return F.affine_forward(x, self.w.value, self.b.value)

    def backward(self, gy, need_input=True):
        x = self._tape()
        gx, gw, gb = F.affine_backward(x, self.w.value, gy)
        self.w.grad += gw
        self.b.grad += gb
        self._cache = None
        return gx


class Sequential(Module):
    def __init__(self, layers):
        self.layers = list(layers)

    def children(self):
        return self.layers

    def forward(self, x, record=False):
        for layer in self.layers:
            x = layer.forward(x, record)
        return x

    def backward(self, gy, need_input=True):
        for i, layer in enumerate(reversed(self.layers)):
            last = i == len(self.layers) - 1
            gy = layer.backward(gy, need_input or not last)
        return gy


class ResidualBlock(Module):
    """[Conv(c,3,1) -> LeakyReLU -> Conv(c,3,1)] + skip, 1x1x1 projection when channels change."""

    def __init__(self, in_ch, c, spectral_norm=True, alpha=0.2, sn_iters=1):
        self.body = Sequential([
            Conv3d(in_ch, c, 3, 1, 1, spectral_norm, sn_iters),
            LeakyReLU(alpha),
            Conv3d(c, c, 3, 1, 1, spectral_norm, sn_iters),
        ])
        self.proj = Conv3d(in_ch, c, 1, 1, 0, spectral_norm, sn_iters) if in_ch != c else None

    def children(self):
        return [self.body] + ([self.proj] if self.proj is not None else [])

    def register(self, store, prefix, rng, dtype):
        self.body.register(store, prefix + "body.", rng, dtype)
        if self.proj is not None:
            self.proj.register(store, prefix + "proj.", rng, dtype)

    def output_shape(self, shape):
        out = self.body.output_shape(shape)
        skip = self.proj.output_shape(shape) if self.proj is not None else shape
        if tuple(skip) != tuple(out):
            raise ShapeError(f"residual skip shape {skip} != body shape {out}")
        return out

    def forward(self, x, record=False):
        y = self.body.forward(x, record)
        return y + (self.proj.forward(x, record) if self.proj is not None else x)

    def backward(self, gy, need_input=True):
        gx = self.body.backward(gy, need_input)
        if self.proj is not None:
            gs = self.proj.backward(gy, need_input)
        else:
            gs = gy
        return gx + gs if need_input else None


class DownsampleBlock(Sequential):
    """``ppr``: AvgPool -> Conv(c,3,1,same) -> LeakyReLU.

    ``ae``: Conv(c,4,2,pad 1) -> LeakyReLU.  ``ae_bottleneck``:
    Conv(c,3,1,same) -> LeakyReLU (keeps resolution, see models.build_ae).
    """

    def __init__(self, in_ch, c, variant="ppr", alpha=0.2, spectral_norm=True, sn_iters=1):
        if variant == "ppr":
            layers = [AvgPool3d(), Conv3d(in_ch, c, 3, 1, 1, spectral_norm, sn_iters), LeakyReLU(alpha)]
        elif variant == "ae":
            layers = [Conv3d(in_ch, c, 4, 2, 1), LeakyReLU(alpha)]
        elif variant == "ae_bottleneck":
            layers = [Conv3d(in_ch, c, 3, 1, 1), LeakyReLU(alpha)]
        else:
            raise ConfigError(f"unknown downsample variant {variant!r}")
        super().__init__(layers)


class UpsampleBlock(Sequential):
    """TranspConv(c,4,2,pad 1) -> LeakyReLU."""

    def __init__(self, in_ch, c, alpha=0.2):
        super().__init__([TransposedConv3d(in_ch, c, 4, 2, 1), LeakyReLU(alpha)])


def backward(net, upstream_grad, need_input=True):
    """Reverse pass over ``net``'s recorded tape.

    Returns ``(input_grad, parameter_grads)``; gradients accumulate into the
    store, so callers zero them between steps.
    """
    gx = net.backward(upstream_grad, need_input)
    return gx, net.store.grads()
