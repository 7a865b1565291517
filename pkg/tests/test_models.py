import numpy as np
import pytest

from pprad import models
from pprad.diffcore import layers as L
from pprad.errors import ConfigError, ShapeError


def _conv_tally(in_ch, out_ch, k):
    return in_ch * out_ch * k ** 3 + out_ch


def ppr_tally(m):
    """Hand count of the regressor's blocks."""
    total, c_in = 0, 1
    for c in (m, 2 * m, 4 * m, 8 * m, 16 * m):
        total += _conv_tally(c_in, c, 3) + _conv_tally(c, c, 3)
        if c_in != c:
            total += _conv_tally(c_in, c, 1)
        if c != 16 * m:
            total += _conv_tally(c, c, 3)  # downsample conv
        c_in = c
    return total + (16 * m * 16 * m + 16 * m) + (16 * m * 3 + 3)


def ae_tally(m):
    enc = _conv_tally(1, m, 4) + _conv_tally(m, 2 * m, 4) + _conv_tally(2 * m, 4 * m, 4) + _conv_tally(4 * m, 8 * m, 4)
    enc += _conv_tally(8 * m, 16 * m, 3)
    dec = _conv_tally(16 * m, 8 * m, 4) + _conv_tally(8 * m, 4 * m, 4) + _conv_tally(4 * m, 2 * m, 4)
    return enc + dec + _conv_tally(2 * m, 1, 4)


def test_ppr_output_contract():
    spec = models.build_ppr(1, 19)
    net = models.instantiate(spec, seed=0)
    y = net.forward(np.random.default_rng(0).random((2, 1, 19, 19, 19)))
    assert y.shape == (2, 3)
    assert np.all((y > 0) & (y < 1))


def test_ppr_block_sequence():
    kinds = [ls.kind for ls in models.build_ppr(2, 19).layers]
    assert kinds == ["residual_block", "downsample_block"] * 4 + [
        "residual_block", "global_avg_pool", "affine", "leaky_relu", "affine", "sigmoid"]
    chans = [ls.out_channels for ls in models.build_ppr(2, 19).layers[:9]]
    assert chans == [2, 2, 4, 4, 8, 8, 16, 16, 32]


def test_ppr_convs_all_spectral_normalized():
    net = models.instantiate(models.build_ppr(1, 19))
    convs = [m for m in net.module.modules() if isinstance(m, L.Conv3d)]
    assert convs and all(c.spectral_norm for c in convs)


@pytest.mark.parametrize("m", [1, 2, 4])
def test_param_counts_match_tally(m):
    assert models.count_params(models.build_ppr(m, 19)) == ppr_tally(m)
    assert models.count_params(models.build_ae(m, 64)) == ae_tally(m)


def test_param_count_matches_store_iteration():
    for spec in (models.build_ppr(1, 19), models.build_ae(1, 32)):
        net = models.instantiate(spec)
        assert models.count_params(spec) == sum(p.value.size for _, p in net.store)


def test_doubling_m_doubles_channels():
    # skip projections (k=1) only exist where channel counts change, which differs at m=1
    def convs(m):
        net = models.instantiate(models.build_ppr(m, 19))
        return [c for c in net.module.modules() if isinstance(c, L.Conv3d) and c.k == 3]
    a, b = convs(1), convs(2)
    assert [2 * c.out_ch for c in a] == [c.out_ch for c in b]
    assert models.count_params(models.build_ppr(2, 19)) > models.count_params(models.build_ppr(1, 19))


def test_single_layer_counts():
    spec = models.NetworkSpec("x", 1, 0, ())
    assert models.count_params(spec) == 0
    aff = L.Affine(16, 3)
    assert models._param_count(aff) == 51
    assert models._param_count(L.Conv3d(1, 4, 3)) == 112


@pytest.mark.parametrize("s_p", [15, 14, 3])
def test_ppr_patch_size_rejected(s_p):
    with pytest.raises((ShapeError, ConfigError)):
        models.build_ppr(1, s_p)


def test_ppr_patch_size_15_shape_error():
    with pytest.raises(ShapeError):
        models.build_ppr(1, 15)


def test_ppr_accepts_odd_sizes_from_17():
    for s in (17, 19, 23, 27, 31):
        assert models.build_ppr(1, s).input_side == s


def test_ae_shape_contract():
    net = models.instantiate(models.build_ae(1, 32))
    y = net.forward(np.random.default_rng(1).random((1, 1, 32, 32, 32)))
    assert y.shape == (1, 1, 32, 32, 32)
    assert np.all((y > 0) & (y < 1))


def test_ae_latent_side():
    spec = models.build_ae(1, 64)
    mod = models.build_module(spec)
    shape = spec.input_shape
    for layer in mod.layers[:5]:
        shape = layer.output_shape(shape)
    assert shape == (16, 4, 4, 4)


def test_ae_not_spectral_normalized():
    net = models.instantiate(models.build_ae(1, 32))
    assert not any(isinstance(m, L.Conv3d) and m.spectral_norm for m in net.module.modules())


def test_ae_rejects_bad_side():
    with pytest.raises(ShapeError):
        models.build_ae(1, 40)


@pytest.mark.parametrize("m", [1, 2, 4])
def test_forward_shapes_for_m(m):
    for spec, x in ((models.build_ppr(m, 19), np.zeros((1, 1, 19, 19, 19))),
                    (models.build_ae(m, 32), np.zeros((1, 1, 32, 32, 32)))):
        net = models.instantiate(spec)
        assert net.forward(x).shape == (1, *net.output_shape)


def test_memory_linear_in_batch():
    spec = models.build_ppr(1, 19)
    a = models.estimate_memory(spec, 4)
    b = models.estimate_memory(spec, 8)
    assert b.activation_bytes == 2 * a.activation_bytes
    assert a.optimizer_bytes == 2 * a.parameter_bytes
    assert a.parameter_bytes == 4 * a.parameter_count


def test_memory_empty_network():
    spec = models.NetworkSpec("x", 1, 5, ())
    est = models.estimate_memory(spec, 3)
    assert est.parameter_bytes == 0 and est.optimizer_bytes == 0
    assert est.activation_bytes == 5 ** 3 * 3 * 4 * 2


def test_memory_single_sample_ppr_below_ae():
    for m in (1, 2, 4):
        p = models.estimate_memory(models.build_ppr(m, 19), 1)
        a = models.estimate_memory(models.build_ae(m, 64), 1)
        assert p.total_bytes < a.total_bytes


def test_spec_config_round_trip():
    spec = models.build_ppr(2, 23, sn_iters=2)
    assert models.spec_from_config(spec.config()) == spec
    with pytest.raises(ConfigError):
        models.spec_from_config(dict(spec.config(), block_variant="v9"))
