"""Patch extraction and background-rejecting patch sampling."""

from dataclasses import dataclass

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view
from scipy import ndimage

from .errors import ConfigError, CoordRangeError, SamplingError
from .volumes import Coord, normalize_coord


@dataclass
class Patch:
    values: np.ndarray  # (s_p, s_p, s_p), array axes (z, y, x)
    center: Coord
    s_p: int


@dataclass
class PatchBatch:
    patches: np.ndarray  # (n, s_p, s_p, s_p)
    targets: np.ndarray  # (n, 3) normalized (x, y, z)
    centers: np.ndarray  # (n, 3) integer (x, y, z)
    attempts: int = 0

    def __len__(self):
        return len(self.targets)

    @property
    def acceptance_rate(self):
        return len(self) / self.attempts if self.attempts else 1.0


def _check_size(s_p):
    if s_p < 1 or s_p % 2 == 0:
        raise ConfigError(f"patch size must be a positive odd integer, got {s_p}")


def _check_center(idx, dims):
    if len(idx) != 3 or any(not 0 <= i < d for i, d in zip(idx, dims)):
        raise CoordRangeError(f"center {tuple(idx)} outside volume of dims {tuple(dims)}")


def pad_volume(data, s_p, pad_value=0.0):
    h = s_p // 2
    return np.pad(data, h, mode="constant", constant_values=pad_value)


def extract_patch(v, center_idx, s_p, pad_value=0.0):
    """Cube of side ``s_p`` around ``center_idx`` (x, y, z); outside is ``pad_value``."""
    _check_size(s_p)
    _check_center(center_idx, v.dims)
    h = s_p // 2
    x, y, z = center_idx
    out = np.full((s_p, s_p, s_p), pad_value, dtype=np.float32)
    dz, dy, dx = v.data.shape
    lo = [max(0, c - h) for c in (z, y, x)]
    hi = [min(d, c + h + 1) for c, d in zip((z, y, x), (dz, dy, dx))]
    dst = tuple(slice(l - (c - h), u - (c - h)) for l, u, c in zip(lo, hi, (z, y, x)))
    out[dst] = v.data[lo[0]:hi[0], lo[1]:hi[1], lo[2]:hi[2]]
    return Patch(out, normalize_coord(center_idx, v.dims), s_p)


def is_background_patch(fg_mask, center_idx, s_p):
    """True iff no foreground voxel falls in the patch footprint."""
    _check_size(s_p)
    z0, y0, x0 = fg_mask.shape
    _check_center(center_idx, (x0, y0, z0))
    h = s_p // 2
    x, y, z = center_idx
    window = fg_mask[max(0, z - h):z + h + 1, max(0, y - h):y + h + 1, max(0, x - h):x + h + 1]
    return not window.any()


def acceptance_map(fg_mask, s_p):
    """Boolean grid: True where a centred patch touches the foreground."""
    return ndimage.maximum_filter(fg_mask.astype(np.uint8), size=s_p, mode="constant", cval=0) > 0


def gather_patches(padded, centers, s_p):
    """Patches at integer (x, y, z) ``centers`` from a volume padded by ``s_p // 2``."""
    win = sliding_window_view(padded, (s_p, s_p, s_p))
    return np.ascontiguousarray(win[centers[:, 2], centers[:, 1], centers[:, 0]])


def sample_patch_batch(v, fg_mask, n_patches, s_p, rng, accept=None, padded=None):
    """Draw uniform centers, keep those whose patch touches the foreground.

    ``accept`` and ``padded`` may be precomputed with :func:`acceptance_map`
    and :func:`pad_volume` to save work across calls on the same volume.
    """
    _check_size(s_p)
    if n_patches < 1:
        raise ConfigError(f"n_patches must be >= 1, got {n_patches}")
    if fg_mask.shape != v.data.shape:
        raise ConfigError(f"mask shape {fg_mask.shape} does not match volume {v.data.shape}")
    if accept is None:
        accept = acceptance_map(fg_mask, s_p)
    budget = 100 * n_patches
    dims = np.array(v.dims)
    kept = []
    n_kept = attempts = 0
    while n_kept < n_patches and attempts < budget:
        draw = min(n_patches, budget - attempts)
        c = rng.integers(0, dims, size=(draw, 3))
        ok = accept[c[:, 2], c[:, 1], c[:, 0]]
        need = n_patches - n_kept
        pos = np.flatnonzero(ok)
        if len(pos) >= need:
            # attempts count only up to the draw that filled the batch
            attempts += int(pos[need - 1]) + 1
            kept.append(c[pos[:need]])
            n_kept = n_patches
        else:
            attempts += draw
            kept.append(c[pos])
            n_kept += len(pos)
    if n_kept < n_patches:
        raise SamplingError(
            f"accepted {n_kept} of {n_patches} patches in {attempts} draws "
            f"(acceptance rate {n_kept / attempts:.4f})")
    centers = np.concatenate(kept)
    if padded is None:
        padded = pad_volume(v.data, s_p)
    patches = gather_patches(padded, centers, s_p)
    targets = centers / (dims - 1)
    return PatchBatch(patches, targets, centers, attempts)
