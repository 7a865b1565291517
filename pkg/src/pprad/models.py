"""PPR regressor and AE baseline architectures plus resource accounting."""

from dataclasses import asdict, dataclass, field

import numpy as np

from .diffcore import layers as L
from .diffcore.network import Network
from .errors import ConfigError, ShapeError

BLOCK_VARIANT = "v1"


@dataclass(frozen=True)
class LayerSpec:
    kind: str
    out_channels: int = 0
    kernel: int = 0
    stride: int = 1
    padding: int = 0
    negative_slope: float = 0.2
    spectral_norm: bool = False
    variant: str = ""


@dataclass(frozen=True)
class NetworkSpec:
    kind: str
    m: int
    input_side: int
    layers: tuple = field(default_factory=tuple)
    block_variant: str = BLOCK_VARIANT
    sn_iters: int = 1

    def config(self):
        """The JSON network config embedded in checkpoints."""
        return {"kind": self.kind, "m": self.m, "input_side": self.input_side,
                "block_variant": self.block_variant, "sn_iters": self.sn_iters}

    @property
    def input_shape(self):
        s = self.input_side
        return (1, s, s, s)


@dataclass(frozen=True)
class ResourceEstimate:
    parameter_count: int
    activation_bytes: int
    parameter_bytes: int
    optimizer_bytes: int

    @property
    def total_bytes(self):
        return self.activation_bytes + self.parameter_bytes + self.optimizer_bytes


def build_ppr(m, s_p, sn_iters=1):
    """Block list of the patch-position regressor for patches of side ``s_p``."""
    if m < 1:
        raise ConfigError(f"network size m must be >= 1, got {m}")
    if s_p % 2 == 0:
        raise ConfigError(f"patch size must be odd, got {s_p}")
    side = s_p
    for _ in range(4):
        side //= 2
    if side < 1:
        raise ShapeError(f"patch size {s_p} vanishes after four 2x downsamplings")
    res = lambda c: LayerSpec("residual_block", c, 3, 1, 1, spectral_norm=True)
    down = lambda c: LayerSpec("downsample_block", c, 3, 1, 1, spectral_norm=True, variant="ppr")
    layers = (
        res(m), down(m), res(2 * m), down(2 * m), res(4 * m), down(4 * m), res(8 * m), down(8 * m),
        res(16 * m),
        LayerSpec("global_avg_pool"),
        LayerSpec("affine", 16 * m),
        LayerSpec("leaky_relu", negative_slope=0.2),
        LayerSpec("affine", 3),
        LayerSpec("sigmoid"),
    )
    return NetworkSpec("ppr", m, s_p, layers, sn_iters=sn_iters)


def build_ae(m, n):
    """Block list of the autoencoder for volumes of side ``n``.

    The decoder has four 2x upsampling stages (three Upsample blocks and the
    final transposed conv), so only four encoder blocks halve the grid; the
    fifth (16m) block is a resolution-preserving bottleneck.
    """
    if m < 1:
        raise ConfigError(f"network size m must be >= 1, got {m}")
    if n % 16 != 0 or n < 16:
        raise ShapeError(f"AE input side must be a positive multiple of 16, got {n}")
    down = lambda c, v="ae": LayerSpec("downsample_block", c, 4 if v == "ae" else 3, 2 if v == "ae" else 1,
                                       1, variant=v)
    up = lambda c: LayerSpec("upsample_block", c, 4, 2, 1)
    layers = (
        down(m), down(2 * m), down(4 * m), down(8 * m), down(16 * m, "ae_bottleneck"),
        up(8 * m), up(4 * m), up(2 * m),
        LayerSpec("transp_conv3d", 1, 4, 2, 1),
        LayerSpec("sigmoid"),
    )
    return NetworkSpec("ae", m, n, layers)


def spec_from_config(cfg):
    if cfg.get("block_variant", BLOCK_VARIANT) != BLOCK_VARIANT:
        raise ConfigError(f"unsupported block variant {cfg['block_variant']!r}")
    if cfg["kind"] == "ppr":
        return build_ppr(cfg["m"], cfg["input_side"], cfg.get("sn_iters", 1))
    if cfg["kind"] == "ae":
        return build_ae(cfg["m"], cfg["input_side"])
    raise ConfigError(f"unknown network kind {cfg['kind']!r}")


def _module_for(ls, in_ch, in_features, sn_iters):
    k = ls.kind
    if k == "residual_block":
        return L.ResidualBlock(in_ch, ls.out_channels, ls.spectral_norm, ls.negative_slope, sn_iters)
    if k == "downsample_block":
        return L.DownsampleBlock(in_ch, ls.out_channels, ls.variant, ls.negative_slope, ls.spectral_norm, sn_iters)
    if k == "upsample_block":
        return L.UpsampleBlock(in_ch, ls.out_channels, ls.negative_slope)
    if k == "conv3d":
        return L.Conv3d(in_ch, ls.out_channels, ls.kernel, ls.stride, ls.padding, ls.spectral_norm, sn_iters)
    if k == "transp_conv3d":
        return L.TransposedConv3d(in_ch, ls.out_channels, ls.kernel, ls.stride, ls.padding)
    if k == "avg_pool":
        return L.AvgPool3d()
    if k == "global_avg_pool":
        return L.GlobalAvgPool3d()
    if k == "leaky_relu":
        return L.LeakyReLU(ls.negative_slope)
    if k == "sigmoid":
        return L.Sigmoid()
    if k == "affine":
        return L.Affine(in_features, ls.out_channels)
    raise ConfigError(f"unknown layer kind {k!r}")


def build_module(spec):
    """Module tree for ``spec`` (no parameters allocated)."""
    shape = spec.input_shape
    mods = []
    for ls in spec.layers:
        mod = _module_for(ls, shape[0], int(np.prod(shape)), spec.sn_iters)
        shape = mod.output_shape(shape)
        mods.append(mod)
    return L.Sequential(mods)


def instantiate(spec, seed=0, dtype=np.float32):
    return Network(build_module(spec), spec.config(), spec.input_shape, seed, dtype)


def _param_count(mod):
    if isinstance(mod, (L.Conv3d, L.TransposedConv3d)):
        return mod.in_ch * mod.out_ch * mod.k ** 3 + mod.out_ch
    if isinstance(mod, L.Affine):
        return mod.in_features * mod.out_features + mod.out_features
    return sum(_param_count(c) for c in mod.children())


def count_params(spec):
    """Trainable element count; spectral-norm ``u`` vectors are not counted."""
    return _param_count(build_module(spec))


def _activation_elements(mod, shape):
    """(elements produced by every primitive inside ``mod``, output shape)."""
    if isinstance(mod, L.ResidualBlock):
        total, out = _activation_elements(mod.body, shape)
        if mod.proj is not None:
            t, _ = _activation_elements(mod.proj, shape)
            total += t
        return total + int(np.prod(out)), out
    kids = mod.children()
    if kids or isinstance(mod, L.Sequential):
        total = 0
        for c in kids:
            t, shape = _activation_elements(c, shape)
            total += t
        return total, shape
    out = mod.output_shape(shape)
    return int(np.prod(out)), out


def estimate_memory(spec, batch, bytes_per_scalar=4):
    """Closed-form training-memory model.

    Every primitive output (and the input) is stored once for backward and
    once as its gradient; Adam keeps two moments per parameter.
    """
    mod = build_module(spec)
    acts, _ = _activation_elements(mod, spec.input_shape)
    acts += int(np.prod(spec.input_shape))
    n_params = _param_count(mod)
    pbytes = n_params * bytes_per_scalar
    return ResourceEstimate(
        parameter_count=n_params,
        activation_bytes=acts * batch * bytes_per_scalar * 2,
        parameter_bytes=pbytes,
        optimizer_bytes=2 * pbytes,
    )


def spec_dict(spec):
    return asdict(spec)
