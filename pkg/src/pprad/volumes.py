"""Volumes, coordinates, preprocessing, VOL1 I/O and the phantom generator.

Voxel arrays are stored as ``data[z, y, x]`` (C order, so x varies fastest)
while every index triple, dims triple and coordinate is written ``(x, y, z)``.
"""

import json
import os
import struct
from dataclasses import dataclass, field

import numpy as np
from scipy import ndimage

from .errors import ConfigError, CoordRangeError, FormatError, GenerationError

MAGIC = b"VOL1"
MASK_NAMES = ("foreground", "skull", "hemisphere_left", "hemisphere_right")
ANOMALIES = ("none", "blob_left", "blob_right", "shell_break")
_HEADER = struct.Struct("<4s3IB")


@dataclass
class Volume:
    data: np.ndarray
    spacing: tuple = (1.0, 1.0, 1.0)

    def __post_init__(self):
        self.data = np.asarray(self.data, dtype=np.float32)
        if self.data.ndim != 3 or min(self.data.shape) < 1:
            raise ConfigError(f"volume data must be a nonempty 3D grid, got shape {self.data.shape}")

    @property
    def dims(self):
        z, y, x = self.data.shape
        return (x, y, z)

    def at(self, idx):
        x, y, z = idx
        return float(self.data[z, y, x])


@dataclass(frozen=True)
class Coord:
    x: float
    y: float
    z: float

    def as_array(self):
        return np.array([self.x, self.y, self.z])


@dataclass
class MaskSet:
    foreground: np.ndarray
    skull: np.ndarray
    hemisphere_left: np.ndarray
    hemisphere_right: np.ndarray

    def items(self):
        return [(name, getattr(self, name)) for name in MASK_NAMES]

    def check(self):
        """Raise :class:`ConfigError` unless the mask invariants hold."""
        shape = self.foreground.shape
        for name, m in self.items():
            if m.shape != shape or m.dtype != bool:
                raise ConfigError(f"mask {name} must be a boolean grid of shape {shape}")
        if np.any(self.hemisphere_left & self.hemisphere_right):
            raise ConfigError("hemisphere masks overlap")
        if np.any((self.hemisphere_left | self.hemisphere_right) & ~self.foreground):
            raise ConfigError("hemisphere masks leave the foreground")


@dataclass(frozen=True)
class CaseLabel:
    bleeding_left: bool = False
    bleeding_right: bool = False
    fracture: bool = False

    @property
    def healthy(self):
        return not (self.bleeding_left or self.bleeding_right or self.fracture)

    def to_dict(self):
        return {"bleeding_left": self.bleeding_left, "bleeding_right": self.bleeding_right,
                "fracture": self.fracture}


@dataclass(frozen=True)
class PhantomConfig:
    n: int = 64
    seed: int = 0
    anomaly: str = "none"
    anomaly_radius_frac: float = 0.08
    texture_scale: float = 1.0

    def validate(self):
        if self.n < 32:
            raise ConfigError(f"phantom side must be >= 32, got {self.n}")
        if self.anomaly not in ANOMALIES:
            raise ConfigError(f"unknown anomaly {self.anomaly!r}; expected one of {ANOMALIES}")
        if not 0 < self.anomaly_radius_frac <= 0.2:
            raise ConfigError(f"anomaly_radius_frac must be in (0, 0.2], got {self.anomaly_radius_frac}")
        if self.anomaly_radius_frac * self.n < 2:
            raise ConfigError("anomaly radius must cover at least 2 voxels")
        if self.texture_scale < 0:
            raise ConfigError("texture_scale must be nonnegative")


# ---------------------------------------------------------------- coordinates

def normalize_coord(idx, dims):
    """Map an integer voxel index to the unit cube, extreme indices to 0 and 1."""
    out = []
    for i, d in zip(idx, dims):
        if d < 2:
            raise ConfigError(f"every dim must be >= 2 to normalize, got {tuple(dims)}")
        if not 0 <= i <= d - 1:
            raise CoordRangeError(f"index {tuple(idx)} outside volume of dims {tuple(dims)}")
        out.append(i / (d - 1))
    return Coord(*out)


def denormalize_coord(c, dims):
    vals = c.as_array() if isinstance(c, Coord) else np.asarray(c, dtype=float)
    idx = []
    for v, d in zip(vals, dims):
        if not 0.0 <= v <= 1.0:
            raise CoordRangeError(f"coordinate {tuple(vals)} outside the unit cube")
        idx.append(int(np.rint(v * (d - 1))))
    return tuple(idx)


def normalized_grid(dims):
    """Per-axis normalized index vectors (x, y, z) for ``dims``."""
    return tuple(np.arange(d) / (d - 1) for d in dims)


# -------------------------------------------------------------- preprocessing

def equalize_histogram(v, n_bins=256, mask=None):
    """Remap intensities by the binned empirical CDF.

    Bins span the reference range (foreground voxels if ``mask`` is given).
    A voxel maps to the fraction of reference voxels whose bin is at or
    below its own; values under the reference range map to 0 and values
    above it to 1.  Background therefore stays 0 and the output is in [0, 1].
    """
    if n_bins < 2:
        raise ConfigError(f"n_bins must be >= 2, got {n_bins}")
    data = v.data.astype(np.float64)
    ref = data.ravel() if mask is None else data[mask]
    if ref.size == 0:
        raise ConfigError("histogram reference region is empty")
    lo, hi = float(ref.min()), float(ref.max())
    if hi <= lo:
        out = np.where(data >= lo, 1.0, 0.0)
        return Volume(out.astype(np.float32), v.spacing)
    width = (hi - lo) / n_bins
    ref_bins = np.clip(((ref - lo) / width).astype(np.int64), 0, n_bins - 1)
    cdf = np.cumsum(np.bincount(ref_bins, minlength=n_bins)) / ref.size
    bins = np.clip(np.floor((data - lo) / width).astype(np.int64), 0, n_bins - 1)
    out = cdf[bins]
    out[data < lo] = 0.0
    return Volume(out.astype(np.float32), v.spacing)


def resample_trilinear(v, target_dims):
    """Trilinear resampling on the normalized frame (corner voxels aligned)."""
    target_dims = tuple(int(t) for t in target_dims)
    if min(v.dims) < 2 or min(target_dims) < 2:
        raise ConfigError("resampling needs at least 2 voxels per axis")
    if target_dims == v.dims:
        return Volume(v.data.copy(), v.spacing)
    # array axes are (z, y, x)
    axes = [np.arange(t) * (s - 1) / (t - 1) for s, t in zip(v.dims[::-1], target_dims[::-1])]
    grid = np.meshgrid(*axes, indexing="ij")
    out = ndimage.map_coordinates(v.data.astype(np.float64), grid, order=1, mode="nearest")
    spacing = tuple(sp * (s - 1) / (t - 1) for sp, s, t in zip(v.spacing, v.dims, target_dims))
    return Volume(out.astype(np.float32), spacing)


# ------------------------------------------------------------------- phantoms

def _smooth_noise(rng, shape, sigma):
    f = ndimage.gaussian_filter(rng.standard_normal(shape), sigma, mode="wrap")
    return f / (f.std() + 1e-12)


def _place_blob(rng, region, radius):
    """Center (z, y, x) of a ball of ``radius`` fully inside ``region``."""
    r = int(np.ceil(radius))
    ball = np.zeros((2 * r + 1,) * 3, bool)
    zz, yy, xx = np.mgrid[-r:r + 1, -r:r + 1, -r:r + 1]
    ball[zz ** 2 + yy ** 2 + xx ** 2 <= radius ** 2] = True
    safe = ndimage.binary_erosion(region, structure=ball, border_value=0)
    cand = np.argwhere(safe)
    if len(cand) == 0:
        raise GenerationError(f"no room for a blob of radius {radius:.1f} inside the hemisphere")
    return cand[rng.integers(len(cand))]


def generate_phantom(cfg):
    """Synthetic head: skull shell, textured two-hemisphere interior, optional anomaly.

    Returns ``(Volume, MaskSet, CaseLabel)``; equal seeds give identical output.
    """
    cfg.validate()
    n = cfg.n
    rng = np.random.default_rng(cfg.seed)
    c = (n - 1) / 2.0
    idx = np.arange(n, dtype=np.float64)
    z, y, x = np.meshgrid(idx, idx, idx, indexing="ij")
    u = np.stack([x, y, z]) / (n - 1)  # normalized coordinates

    axes = np.array([0.40, 0.44, 0.40]) * n * (1 + rng.uniform(-0.03, 0.03, 3))
    shift = rng.uniform(-0.5, 0.5, 3)
    dx, dy, dz = x - c - shift[0], y - c - shift[1], z - c - shift[2]
    rho = np.sqrt((dx / axes[0]) ** 2 + (dy / axes[1]) ** 2 + (dz / axes[2]) ** 2)
    thick = max(2.5, 0.05 * n) / axes.mean()
    head = rho <= 1.0
    brain = rho < 1.0 - thick
    skull = head & ~brain

    ts = cfg.texture_scale
    # position-dependent intensity: smooth gradients plus asymmetric landmarks
    bowl = 0.10 * rho ** 2
    gc = np.array([-0.04, 0.06, 0.10]) + rng.uniform(-0.01, 0.01, 3)
    grad = np.tensordot(gc, u, axes=1)
    tissue = 0.35 + bowl + grad + 0.025 * ts * _smooth_noise(rng, x.shape, 1.5)
    # ventricle-like dark region; off-center in y and slightly to the left
    vc = np.array([c - 0.05 * n, c + 0.10 * n, c + 0.02 * n]) + rng.uniform(-0.5, 0.5, 3)
    vr = np.array([0.09, 0.16, 0.08]) * n
    vent = ((x - vc[0]) / vr[0]) ** 2 + ((y - vc[1]) / vr[1]) ** 2 + ((z - vc[2]) / vr[2]) ** 2
    tissue = tissue - 0.22 * np.exp(-2.0 * vent)
    # a brighter dense spot in the front right, away from the ventricle
    sc = np.array([c + 0.18 * n, c - 0.20 * n, c - 0.08 * n])
    spot = ((x - sc[0]) ** 2 + (y - sc[1]) ** 2 + (z - sc[2]) ** 2) / (0.07 * n) ** 2
    tissue = tissue + 0.15 * np.exp(-spot)
    bone = 0.88 + 0.03 * ts * _smooth_noise(rng, x.shape, 1.0)

    data = np.zeros(x.shape)
    data[brain] = tissue[brain]
    data[skull] = bone[skull]

    mid = n // 2
    left = brain & (x < mid)
    right = brain & (x >= mid)
    masks = MaskSet(head.copy(), skull.copy(), left, right)

    label = CaseLabel()
    radius = cfg.anomaly_radius_frac * n
    if cfg.anomaly in ("blob_left", "blob_right"):
        region = left if cfg.anomaly == "blob_left" else right
        bz, by, bx = _place_blob(rng, region, radius)
        ball = (x - bx) ** 2 + (y - by) ** 2 + (z - bz) ** 2 <= radius ** 2
        data[ball] = 0.80 + 0.02 * ts * rng.standard_normal(int(ball.sum()))
        label = CaseLabel(bleeding_left=cfg.anomaly == "blob_left",
                          bleeding_right=cfg.anomaly == "blob_right")
    elif cfg.anomaly == "shell_break":
        # gap in the upper half of the shell, centred on a random direction
        theta = rng.uniform(0, 2 * np.pi)
        elev = rng.uniform(0.1, 0.9)
        d = np.array([np.cos(theta) * np.sqrt(1 - elev ** 2), np.sin(theta) * np.sqrt(1 - elev ** 2), elev])
        p = c + shift + d * axes
        near = (x - p[0]) ** 2 + (y - p[1]) ** 2 + (z - p[2]) ** 2 <= (1.3 * radius) ** 2
        gap = skull & near
        if not gap.any():
            raise GenerationError("shell break missed the skull")
        data[gap] = 0.0
        label = CaseLabel(fracture=True)

    data = np.clip(data, 0.0, 1.0)
    data[~head] = 0.0
    return Volume(data.astype(np.float32)), masks, label


# ----------------------------------------------------------------------- VOL1

def write_volume(v, path, masks=None):
    """Write ``v`` (and optional masks) as a VOL1 file."""
    named = [] if masks is None else [(k, m) for k, m in masks.items() if m is not None]
    with open(path, "wb") as fh:
        fh.write(_HEADER.pack(MAGIC, *v.dims, len(named)))
        fh.write(np.ascontiguousarray(v.data, dtype="<f4").tobytes())
        for name, m in named:
            if m.shape != v.data.shape:
                raise ConfigError(f"mask {name} has shape {m.shape}, volume {v.data.shape}")
            fh.write(name.encode("ascii").ljust(16, b"\0")[:16])
            fh.write(np.ascontiguousarray(m, dtype=np.uint8).tobytes())


def read_volume(path):
    """Read a VOL1 file; returns ``(Volume, MaskSet or None)``."""
    with open(path, "rb") as fh:
        buf = fh.read()
    if len(buf) < _HEADER.size:
        raise FormatError("file shorter than the VOL1 header", len(buf))
    magic, dx, dy, dz, n_masks = _HEADER.unpack_from(buf)
    if magic != MAGIC:
        raise FormatError(f"bad magic {magic!r}", 0)
    if min(dx, dy, dz) < 1:
        raise FormatError(f"invalid dims {(dx, dy, dz)}", 4)
    if n_masks > len(MASK_NAMES):
        raise FormatError(f"mask count {n_masks} exceeds {len(MASK_NAMES)}", 16)
    count = dx * dy * dz
    off = _HEADER.size
    if len(buf) < off + 4 * count:
        have = (len(buf) - off) // 4
        raise FormatError(f"voxel payload truncated: {have} of {count} floats", off + 4 * have)
    data = np.frombuffer(buf, dtype="<f4", count=count, offset=off).reshape(dz, dy, dx).astype(np.float32)
    off += 4 * count
    found = {}
    for _ in range(n_masks):
        if len(buf) < off + 16:
            raise FormatError("mask name truncated", off)
        name = buf[off:off + 16].rstrip(b"\0").decode("ascii", errors="replace")
        off += 16
        if name not in MASK_NAMES:
            raise FormatError(f"unknown mask name {name!r}", off - 16)
        if len(buf) < off + count:
            raise FormatError(f"mask {name} truncated", len(buf))
        raw = np.frombuffer(buf, dtype=np.uint8, count=count, offset=off)
        if raw.max(initial=0) > 1:
            raise FormatError(f"mask {name} holds values other than 0/1", off + int(np.argmax(raw > 1)))
        found[name] = raw.reshape(dz, dy, dx).astype(bool)
        off += count
    if off != len(buf):
        raise FormatError(f"{len(buf) - off} trailing bytes", off)
    masks = None
    if found:
        empty = np.zeros(data.shape, bool)
        masks = MaskSet(*(found.get(k, empty) for k in MASK_NAMES))
    return Volume(data), masks


# ------------------------------------------------------------------- manifest

@dataclass
class ManifestEntry:
    path: str
    labels: CaseLabel = field(default_factory=CaseLabel)
    split: str = "train"

    def to_dict(self):
        return {"path": self.path, "labels": self.labels.to_dict(), "split": self.split}


def write_manifest(entries, path):
    with open(path, "w") as fh:
        json.dump([e.to_dict() for e in entries], fh, indent=1)
        fh.write("\n")


def read_manifest(path):
    """Entries with paths resolved against the manifest's directory."""
    try:
        with open(path) as fh:
            raw = json.load(fh)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"manifest {path} is not valid JSON: {exc}") from None
    if not isinstance(raw, list):
        raise ConfigError(f"manifest {path} must hold a JSON array")
    base = os.path.dirname(os.path.abspath(path))
    out = []
    for i, item in enumerate(raw):
        try:
            lab = item["labels"]
            split = item["split"]
            entry = ManifestEntry(
                os.path.join(base, item["path"]),
                CaseLabel(bool(lab["bleeding_left"]), bool(lab["bleeding_right"]), bool(lab["fracture"])),
                split,
            )
        except (KeyError, TypeError) as exc:
            raise ConfigError(f"manifest entry {i} malformed: missing {exc}") from None
        if split not in ("train", "test"):
            raise ConfigError(f"manifest entry {i}: split must be train or test, got {split!r}")
        out.append(entry)
    return out
