import numpy as np
import pytest
from scipy import stats

from pprad.errors import ConfigError, CoordRangeError, SamplingError
from pprad.sampling import extract_patch, is_background_patch, sample_patch_batch
from pprad.volumes import PhantomConfig, Volume, generate_phantom, normalize_coord


@pytest.fixture(scope="module")
def phantom():
    v, m, _ = generate_phantom(PhantomConfig(32, 3))
    return v, m


def test_single_voxel_patch():
    v = Volume(np.random.default_rng(0).random((6, 7, 8)))
    p = extract_patch(v, (4, 3, 2), 1)
    assert p.values.shape == (1, 1, 1)
    assert p.values[0, 0, 0] == v.data[2, 3, 4]
    assert p.center == normalize_coord((4, 3, 2), v.dims)


def test_corner_patch_padding_count():
    v = Volume(np.full((5, 5, 5), 2.0))
    p = extract_patch(v, (0, 0, 0), 3)
    assert np.sum(p.values == 0) == 19 and np.sum(p.values == 2.0) == 8


def test_adjacent_patches_overlap():
    v = Volume(np.random.default_rng(1).random((12, 12, 12)) + 1)
    a = extract_patch(v, (5, 6, 6), 5).values
    b = extract_patch(v, (6, 6, 6), 5).values
    np.testing.assert_array_equal(a[:, :, 1:], b[:, :, :-1])
    assert a[:, :, 1:].size == (5 - 1) * 5 ** 2


def test_patch_matches_direct_slicing():
    rng = np.random.default_rng(2)
    v = Volume(rng.random((9, 10, 11)))
    for _ in range(20):
        c = (rng.integers(11), rng.integers(10), rng.integers(9))
        p = extract_patch(v, c, 5, pad_value=-1.0).values
        for dz, dy, dx in np.ndindex(5, 5, 5):
            x, y, z = c[0] + dx - 2, c[1] + dy - 2, c[2] + dz - 2
            inside = 0 <= x < 11 and 0 <= y < 10 and 0 <= z < 9
            assert p[dz, dy, dx] == (v.data[z, y, x] if inside else -1.0)


def test_patch_errors():
    v = Volume(np.zeros((4, 4, 4)))
    with pytest.raises(ConfigError):
        extract_patch(v, (1, 1, 1), 4)
    with pytest.raises(CoordRangeError):
        extract_patch(v, (4, 0, 0), 3)


def test_background_rule():
    mask = np.zeros((10, 10, 10), bool)
    mask[2:8, 2:8, 2:8] = True
    assert not is_background_patch(mask, (5, 5, 5), 3)
    empty = np.zeros_like(mask)
    assert is_background_patch(empty, (5, 5, 5), 3)
    one = np.zeros_like(mask)
    one[0, 0, 0] = True
    assert not is_background_patch(one, (1, 1, 1), 3)
    assert is_background_patch(one, (2, 2, 2), 3)


def test_all_foreground_acceptance_one():
    v = Volume(np.random.default_rng(3).random((8, 8, 8)))
    b = sample_patch_batch(v, np.ones((8, 8, 8), bool), 50, 3, np.random.default_rng(0))
    assert len(b) == 50 and b.attempts == 50 and b.acceptance_rate == 1.0


def test_empty_foreground_raises():
    v = Volume(np.zeros((8, 8, 8)))
    with pytest.raises(SamplingError, match="acceptance rate"):
        sample_patch_batch(v, np.zeros((8, 8, 8), bool), 4, 3, np.random.default_rng(0))


def test_batch_targets_and_patches_consistent(phantom):
    v, m = phantom
    b = sample_patch_batch(v, m.foreground, 64, 7, np.random.default_rng(4))
    for patch, target, center in zip(b.patches, b.targets, b.centers):
        c = tuple(int(i) for i in center)
        np.testing.assert_array_equal(patch, extract_patch(v, c, 7).values)
        assert tuple(target) == tuple(normalize_coord(c, v.dims).as_array())
        assert not is_background_patch(m.foreground, c, 7)


def test_sampling_deterministic(phantom):
    v, m = phantom
    a = sample_patch_batch(v, m.foreground, 32, 7, np.random.default_rng(5))
    b = sample_patch_batch(v, m.foreground, 32, 7, np.random.default_rng(5))
    c = sample_patch_batch(v, m.foreground, 32, 7, np.random.default_rng(6))
    assert a.patches.tobytes() == b.patches.tobytes()
    assert sorted(map(tuple, a.targets)) != sorted(map(tuple, c.targets))


def test_sampling_uniform_over_accepted_region():
    # 6^3 grid with foreground in one corner block: accepted region is known
    v = Volume(np.ones((6, 6, 6)))
    fg = np.zeros((6, 6, 6), bool)
    fg[:2, :2, :2] = True
    b = sample_patch_batch(v, fg, 100_000, 3, np.random.default_rng(7))
    idx = b.centers[:, 2] * 36 + b.centers[:, 1] * 6 + b.centers[:, 0]
    counts = np.bincount(idx, minlength=216)
    accepted = np.zeros((6, 6, 6), bool)
    accepted[:3, :3, :3] = True
    assert counts[~accepted.ravel()].sum() == 0
    obs = counts[accepted.ravel()]
    assert stats.chisquare(obs).pvalue > 0.001
