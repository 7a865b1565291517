import struct

import numpy as np
import pytest

from pprad.errors import ConfigError, CoordRangeError, FormatError, GenerationError
from pprad.volumes import (Coord, ManifestEntry, CaseLabel, PhantomConfig, Volume, denormalize_coord,
                           equalize_histogram, generate_phantom, normalize_coord, read_manifest,
                           read_volume, resample_trilinear, write_manifest, write_volume)

import oracles


# -------------------------------------------------------------- coordinates

def test_normalize_corners_and_interior():
    d = (256, 256, 256)
    assert normalize_coord((0, 0, 0), d) == Coord(0.0, 0.0, 0.0)
    assert normalize_coord((255, 255, 255), d) == Coord(1.0, 1.0, 1.0)
    assert normalize_coord((128, 64, 32), d) == Coord(128 / 255, 64 / 255, 32 / 255)


def test_normalize_out_of_range():
    with pytest.raises(CoordRangeError):
        normalize_coord((256, 0, 0), (256, 256, 256))
    with pytest.raises(CoordRangeError):
        normalize_coord((-1, 0, 0), (8, 8, 8))


def test_denormalize_rounds_to_nearest():
    assert denormalize_coord(Coord(0.5, 0.0, 1.0), (64, 10, 7)) == (32, 0, 6)
    with pytest.raises(CoordRangeError):
        denormalize_coord((1.2, 0, 0), (4, 4, 4))


def test_normalize_anisotropic_dims():
    c = normalize_coord((3, 1, 0), (4, 3, 2))
    assert (c.x, c.y, c.z) == (1.0, 0.5, 0.0)


# ------------------------------------------------------------- equalization

def test_equalize_constant():
    out = equalize_histogram(Volume(np.full((4, 4, 4), 0.3)))
    assert np.unique(out.data).size == 1


def test_equalize_uniform_is_near_identity():
    n = 256 * 31 + 1
    vals = np.arange(n) / (n - 1)
    v = Volume(np.random.default_rng(0).permutation(vals).reshape(n, 1, 1))
    out = equalize_histogram(v, 256)
    assert np.max(np.abs(out.data - v.data)) <= 1 / 256 + 1e-6


def test_equalize_two_levels():
    data = np.full(100, 0.9)
    data[:25] = 0.2
    v = Volume(np.random.default_rng(1).permutation(data).reshape(4, 5, 5))
    out = equalize_histogram(v)
    np.testing.assert_allclose(np.sort(np.unique(out.data)), [0.25, 1.0])
    np.testing.assert_allclose(out.data.ravel(), oracles.rank_cdf(v.data.ravel(), v.data.ravel()), atol=1e-7)


def test_equalize_matches_rank_oracle_on_quantized_values():
    rng = np.random.default_rng(2)
    n_bins = 16
    # 0, 1 and interior bin centres: every distinct value owns one bin
    levels = np.r_[0.0, (np.arange(1, n_bins - 1) + 0.5) / n_bins, 1.0]
    data = levels[rng.integers(0, len(levels), 6 ** 3)]
    data[0], data[1] = 0.0, 1.0
    v = Volume(data.reshape(6, 6, 6))
    out = equalize_histogram(v, n_bins=n_bins)
    np.testing.assert_allclose(out.data.ravel(), oracles.rank_cdf(v.data.ravel(), v.data.ravel()), atol=1e-6)


def test_equalize_foreground_restricted():
    rng = np.random.default_rng(3)
    data = np.zeros((8, 8, 8))
    mask = np.zeros_like(data, bool)
    mask[2:6, 2:6, 2:6] = True
    data[mask] = rng.uniform(0.4, 0.6, mask.sum())
    out = equalize_histogram(Volume(data), 64, mask)
    assert np.all(out.data[~mask] == 0)
    assert out.data[mask].max() == 1.0
    assert out.data[mask].min() > 0


def test_equalize_monotone():
    v = Volume(np.random.default_rng(4).random((6, 6, 6)))
    out = equalize_histogram(v, 32)
    order = np.argsort(v.data.ravel())
    assert np.all(np.diff(out.data.ravel()[order]) >= 0)


def test_equalize_bin_count_validated():
    with pytest.raises(ConfigError):
        equalize_histogram(Volume(np.zeros((2, 2, 2))), 1)


# -------------------------------------------------------------- resampling

def test_resample_identity():
    v = Volume(np.random.default_rng(5).random((5, 6, 7)))
    np.testing.assert_array_equal(resample_trilinear(v, v.dims).data, v.data)


def test_resample_ramp_stays_linear():
    x = np.linspace(0, 1, 9)
    v = Volume(np.broadcast_to(x, (9, 9, 9)).copy())
    out = resample_trilinear(v, (17, 17, 17))
    np.testing.assert_allclose(out.data, np.broadcast_to(np.linspace(0, 1, 17), (17, 17, 17)), atol=1e-6)


def test_resample_matches_direct_oracle():
    v = Volume(np.random.default_rng(6).random((8, 8, 8)))
    out = resample_trilinear(v, (4, 4, 4))
    np.testing.assert_allclose(out.data, oracles.trilinear(v.data.astype(float), (4, 4, 4)), atol=1e-6)


def test_resample_anisotropic_matches_oracle():
    v = Volume(np.random.default_rng(7).random((5, 4, 6)))
    out = resample_trilinear(v, (3, 7, 4))  # (x, y, z)
    assert out.data.shape == (4, 7, 3)
    np.testing.assert_allclose(out.data, oracles.trilinear(v.data.astype(float), (4, 7, 3)), atol=1e-6)


def test_resample_constant_down_up():
    v = Volume(np.full((9, 9, 9), 0.7))
    back = resample_trilinear(resample_trilinear(v, (4, 4, 4)), (9, 9, 9))
    np.testing.assert_array_equal(back.data, v.data)


# ----------------------------------------------------------------- phantom

def test_phantom_healthy_contract():
    v, m, lab = generate_phantom(PhantomConfig(32, 1))
    assert lab == CaseLabel() and lab.healthy
    assert m.foreground.any()
    assert not np.any(m.hemisphere_left & m.hemisphere_right)
    m.check()
    assert np.all(v.data[~m.foreground] == 0)
    assert v.data.min() >= 0 and v.data.max() <= 1


@pytest.mark.parametrize("anomaly,field", [("blob_left", "bleeding_left"), ("blob_right", "bleeding_right"),
                                           ("shell_break", "fracture")])
def test_phantom_anomaly_labels(anomaly, field):
    healthy, _, _ = generate_phantom(PhantomConfig(48, 5))
    v, m, lab = generate_phantom(PhantomConfig(48, 5, anomaly))
    assert getattr(lab, field) and sum(lab.to_dict().values()) == 1
    changed = v.data != healthy.data
    assert changed.any()
    if anomaly == "blob_left":
        assert np.all(m.hemisphere_left[changed])
    elif anomaly == "blob_right":
        assert np.all(m.hemisphere_right[changed])
    else:
        assert np.all(m.skull[changed]) and np.all(v.data[changed] == 0)


def test_phantom_determinism_and_seed_sensitivity():
    a, ma, _ = generate_phantom(PhantomConfig(32, 11, "blob_left"))
    b, _, _ = generate_phantom(PhantomConfig(32, 11, "blob_left"))
    c, _, _ = generate_phantom(PhantomConfig(32, 12, "blob_left"))
    assert a.data.tobytes() == b.data.tobytes()
    assert np.mean(a.data[ma.foreground] != c.data[ma.foreground]) > 0.01


def test_phantom_config_validation():
    with pytest.raises(ConfigError):
        generate_phantom(PhantomConfig(16))
    with pytest.raises(ConfigError):
        generate_phantom(PhantomConfig(32, anomaly="tumour"))
    with pytest.raises(ConfigError):
        generate_phantom(PhantomConfig(32, anomaly_radius_frac=0.05))
    with pytest.raises(ConfigError):
        generate_phantom(PhantomConfig(32, anomaly_radius_frac=0.3))


def test_phantom_blob_that_cannot_fit():
    with pytest.raises(GenerationError):
        generate_phantom(PhantomConfig(32, 0, "blob_left", anomaly_radius_frac=0.2))


# --------------------------------------------------------------------- VOL1

def test_vol1_round_trip(tmp_path):
    rng = np.random.default_rng(8)
    v = Volume(rng.standard_normal((16, 16, 16)))
    write_volume(v, tmp_path / "a.vol")
    w, masks = read_volume(tmp_path / "a.vol")
    assert masks is None
    assert w.data.tobytes() == v.data.tobytes()


def test_vol1_round_trip_with_masks(tmp_path):
    v, m, _ = generate_phantom(PhantomConfig(32, 2, "shell_break"))
    write_volume(v, tmp_path / "p.vol", m)
    w, m2 = read_volume(tmp_path / "p.vol")
    assert w.data.tobytes() == v.data.tobytes()
    for (name, a), (_, b) in zip(m.items(), m2.items()):
        np.testing.assert_array_equal(a, b, err_msg=name)


def test_vol1_layout_is_x_fastest(tmp_path):
    data = np.arange(24, dtype=np.float32).reshape(2, 3, 4)  # z, y, x
    write_volume(Volume(data), tmp_path / "l.vol")
    raw = (tmp_path / "l.vol").read_bytes()
    assert raw[:4] == b"VOL1"
    assert struct.unpack("<3IB", raw[4:17]) == (4, 3, 2, 0)
    assert np.frombuffer(raw[17:], "<f4")[1] == data[0, 0, 1]


def test_vol1_bad_magic(tmp_path):
    write_volume(Volume(np.zeros((2, 2, 2))), tmp_path / "a.vol")
    raw = bytearray((tmp_path / "a.vol").read_bytes())
    raw[:4] = b"VOLX"
    (tmp_path / "b.vol").write_bytes(bytes(raw))
    with pytest.raises(FormatError):
        read_volume(tmp_path / "b.vol")


def test_vol1_truncated_payload_offset(tmp_path):
    raw = b"VOL1" + struct.pack("<3IB", 4, 4, 4, 0) + np.zeros(60, "<f4").tobytes()
    (tmp_path / "t.vol").write_bytes(raw)
    with pytest.raises(FormatError) as exc:
        read_volume(tmp_path / "t.vol")
    assert exc.value.offset == 17 + 60 * 4


def test_manifest_round_trip(tmp_path):
    entries = [ManifestEntry("a.vol", CaseLabel(), "train"),
               ManifestEntry("b.vol", CaseLabel(bleeding_right=True), "test")]
    write_manifest(entries, tmp_path / "manifest.json")
    back = read_manifest(tmp_path / "manifest.json")
    assert [e.labels for e in back] == [e.labels for e in entries]
    assert back[1].path == str(tmp_path / "b.vol")


def test_manifest_rejects_bad_split(tmp_path):
    (tmp_path / "m.json").write_text('[{"path": "a", "labels": {"bleeding_left": false, '
                                     '"bleeding_right": false, "fracture": false}, "split": "val"}]')
    with pytest.raises(ConfigError):
        read_manifest(tmp_path / "m.json")
