"""Training loops, losses, error-map inference and post-filters."""

import csv
import json
import logging
import os
import time
from dataclasses import asdict, dataclass, field

import numpy as np
from scipy import ndimage

from . import models
from .diffcore.checkpoint import load_state, read_checkpoint, write_checkpoint
from .diffcore.optim import AdamState, adam_step
from .errors import ConfigError, NumericError, ShapeError, ValidationError
from .sampling import acceptance_map, gather_patches, pad_volume, sample_patch_batch
from .volumes import CaseLabel, Volume, read_volume

log = logging.getLogger(__name__)

DEFAULT_LR = {"ppr": 1e-4, "ae": 1e-3}
SQRT3 = float(np.sqrt(3.0))


@dataclass
class TrainConfig:
    model: str = "ppr"
    epochs: int = 200
    lr: float = None  # None picks the per-model default
    m: int = 2
    s_p: int = 19
    patches_per_volume: int = 256
    volumes_per_batch: int = 4
    seed: int = 7
    checkpoint_every: int = 0
    sn_iters: int = 1

    def __post_init__(self):
        if self.model not in DEFAULT_LR:
            raise ConfigError(f"model must be 'ppr' or 'ae', got {self.model!r}")
        if self.lr is None:
            self.lr = DEFAULT_LR[self.model]
        if self.lr < 0 or not np.isfinite(self.lr):
            raise ConfigError(f"learning rate must be a finite nonnegative value, got {self.lr}")
        if self.epochs < 1:
            raise ConfigError(f"epochs must be >= 1, got {self.epochs}")
        if self.patches_per_volume < 1 or self.volumes_per_batch < 1:
            raise ConfigError("patches_per_volume and volumes_per_batch must be >= 1")
        if self.s_p % 2 == 0:
            raise ConfigError(f"patch size must be odd, got {self.s_p}")
        if self.checkpoint_every < 0:
            raise ConfigError("checkpoint_every must be >= 0")

    def to_dict(self):
        return asdict(self)


@dataclass
class TrainHistory:
    loss: list = field(default_factory=list)
    seconds: list = field(default_factory=list)

    def __len__(self):
        return len(self.loss)

    def append(self, loss, seconds):
        self.loss.append(float(loss))
        self.seconds.append(float(seconds))

    def write_csv(self, path):
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["epoch", "loss", "seconds"])
            for i, (l, s) in enumerate(zip(self.loss, self.seconds), 1):
                w.writerow([i, repr(l), f"{s:.3f}"])

    @classmethod
    def read_csv(cls, path):
        h = cls()
        with open(path, newline="") as fh:
            for row in csv.DictReader(fh):
                h.append(float(row["loss"]), float(row["seconds"]))
        return h


@dataclass
class Case:
    volume: Volume
    masks: object
    label: CaseLabel
    case_id: str = ""


@dataclass
class ErrorMap:
    data: np.ndarray  # (z, y, x)
    kind: str = "ppr"

    def as_volume(self):
        return Volume(self.data)


def load_cases(entries, split=None):
    """Read the manifest ``entries`` (optionally one split) into :class:`Case` objects."""
    out = []
    for e in entries:
        if split is not None and e.split != split:
            continue
        vol, masks = read_volume(e.path)
        out.append(Case(vol, masks, e.labels, os.path.splitext(os.path.basename(e.path))[0]))
    return out


def _require_healthy(cases):
    if not cases:
        raise ValidationError("training set is empty")
    bad = [c.case_id or str(i) for i, c in enumerate(cases) if not c.label.healthy]
    if bad:
        raise ValidationError(f"training set holds anomalous volumes: {', '.join(bad)}")


# ----------------------------------------------------------------------- loss

def coords_loss(x, x_hat):
    """Euclidean (not squared) distance between two coordinates."""
    return float(np.linalg.norm(np.asarray(x, dtype=np.float64) - np.asarray(x_hat, dtype=np.float64)))


def coords_loss_batch(targets, pred):
    """Mean distance over a batch and its gradient w.r.t. ``pred``."""
    diff = pred.astype(np.float64) - targets
    r = np.linalg.norm(diff, axis=1)
    safe = np.where(r > 0, r, 1.0)
    grad = np.where(r[:, None] > 0, diff / safe[:, None], 0.0) / len(r)
    return float(r.mean()), grad


def l1_loss(x, y):
    """Mean absolute difference and its gradient w.r.t. ``y``."""
    d = y.astype(np.float64) - x
    return float(np.abs(d).mean()), np.sign(d) / d.size


# ------------------------------------------------------------------- training

def _spec_for(cfg, n):
    if cfg.model == "ppr":
        return models.build_ppr(cfg.m, cfg.s_p, cfg.sn_iters)
    return models.build_ae(cfg.m, n)


def _header(cfg, epoch, spec):
    return {"model": cfg.model, "m": cfg.m, "s_p": cfg.s_p if cfg.model == "ppr" else None,
            "input_side": spec.input_side, "seed": cfg.seed, "epoch": epoch, "train": cfg.to_dict()}


def _save(out_dir, name, net, cfg, epoch, spec):
    path = os.path.join(out_dir, name)
    write_checkpoint(path, net, _header(cfg, epoch, spec))
    return path


def _train_loop(cases, cfg, out_dir, step_fn, spec, net):
    """Shared epoch loop; ``step_fn(batch_cases, rng)`` returns the batch loss."""
    state = AdamState(lr=cfg.lr)
    rng = np.random.default_rng([cfg.seed, 1])
    history = TrainHistory()
    group = 1 if cfg.model == "ppr" else cfg.volumes_per_batch
    net.train()
    for epoch in range(1, cfg.epochs + 1):
        t0 = time.perf_counter()
        order = rng.permutation(len(cases))
        losses, weights = [], []
        for start in range(0, len(order), group):
            batch = [cases[i] for i in order[start:start + group]]
            loss = step_fn(batch, rng)
            if not np.isfinite(loss):
                ids = ", ".join(c.case_id for c in batch)
                raise NumericError(f"non-finite loss at epoch {epoch}, volumes [{ids}]")
            net.store.zero_grad()
            net.backward(step_fn.grad)
            adam_step(net.store, net.store.grads(), state)
            losses.append(loss)
            weights.append(len(batch))
        history.append(np.average(losses, weights=weights), time.perf_counter() - t0)
        log.info("epoch %d/%d loss %.5f (%.1fs)", epoch, cfg.epochs, history.loss[-1], history.seconds[-1])
        if out_dir and cfg.checkpoint_every and epoch % cfg.checkpoint_every == 0 and epoch < cfg.epochs:
            _save(out_dir, f"epoch_{epoch:05d}.pprc", net, cfg, epoch, spec)
    net.eval()
    if out_dir:
        _save(out_dir, "final.pprc", net, cfg, cfg.epochs, spec)
        history.write_csv(os.path.join(out_dir, "history.csv"))
    return net, history


class _PPRStep:
    def __init__(self, net, cfg):
        self.net, self.cfg, self.grad = net, cfg, None
        self._cache = {}

    def _prepared(self, case):
        key = id(case)
        if key not in self._cache:
            v, s_p = case.volume, self.cfg.s_p
            self._cache[key] = (acceptance_map(case.masks.foreground, s_p), pad_volume(v.data, s_p))
        return self._cache[key]

    def __call__(self, batch, rng):
        (case,) = batch
        accept, padded = self._prepared(case)
        pb = sample_patch_batch(case.volume, case.masks.foreground, self.cfg.patches_per_volume,
                                self.cfg.s_p, rng, accept=accept, padded=padded)
        pred = self.net.forward(pb.patches[:, None], record=True)
        loss, self.grad = coords_loss_batch(pb.targets, pred)
        return loss


class _AEStep:
    def __init__(self, net):
        self.net, self.grad = net, None

    def __call__(self, batch, rng):
        x = np.stack([c.volume.data for c in batch])[:, None]
        y = self.net.forward(x, record=True)
        loss, self.grad = l1_loss(x, y)
        return loss


def _check_cases(cases, cfg):
    _require_healthy(cases)
    if cfg.model == "ppr":
        for c in cases:
            if c.masks is None:
                raise ValidationError(f"training volume {c.case_id} has no foreground mask")
    shapes = {c.volume.data.shape for c in cases}
    if len(shapes) != 1:
        raise ValidationError(f"training volumes differ in shape: {sorted(shapes)}")
    return shapes.pop()


def train_ppr(cases, cfg, out_dir=None):
    """Fit the patch position regressor on healthy ``cases``; returns (net, history)."""
    if cfg.model != "ppr":
        raise ConfigError("train_ppr needs a config with model='ppr'")
    _check_cases(cases, cfg)
    spec = _spec_for(cfg, None)
    net = models.instantiate(spec, seed=cfg.seed)
    return _train_loop(cases, cfg, out_dir, _PPRStep(net, cfg), spec, net)


def train_ae(cases, cfg, out_dir=None):
    """Fit the autoencoder baseline on healthy ``cases``; returns (net, history)."""
    if cfg.model != "ae":
        raise ConfigError("train_ae needs a config with model='ae'")
    shape = _check_cases(cases, cfg)
    if len(set(shape)) != 1:
        raise ShapeError(f"autoencoder needs cubic volumes, got {shape}")
    spec = _spec_for(cfg, shape[0])
    net = models.instantiate(spec, seed=cfg.seed)
    return _train_loop(cases, cfg, out_dir, _AEStep(net), spec, net)


def train(cases, cfg, out_dir=None):
    return (train_ppr if cfg.model == "ppr" else train_ae)(cases, cfg, out_dir)


def load_network(path):
    """Rebuild a network from a checkpoint; returns (net, header)."""
    header, params, buffers = read_checkpoint(path)
    spec = models.spec_from_config(header["network"])
    net = models.instantiate(spec, seed=0)
    load_state(net, params, buffers)
    net.eval()
    return net, header


# ------------------------------------------------------------------ inference

def _lattice(n, stride):
    pts = np.arange(0, n, stride)
    nearest = np.minimum((np.arange(n) + stride // 2) // stride, len(pts) - 1)
    return pts, nearest


def infer_error_map_ppr(net, v, stride=1, batch_size=512, s_p=None):
    """Coordinate-regression error at every voxel.

    Voxels on the ``stride`` lattice are evaluated directly; every other
    voxel takes the value of its nearest lattice point.
    """
    if net.config.get("kind") != "ppr":
        raise ConfigError("infer_error_map_ppr needs a PPR network")
    side = net.config["input_side"]
    if s_p is not None and s_p != side:
        raise ConfigError(f"patch size {s_p} does not match the network's {side}")
    if stride < 1:
        raise ConfigError(f"stride must be >= 1, got {stride}")
    if min(v.dims) < 2:
        raise ShapeError("volume needs at least 2 voxels per axis")
    net.eval()
    dims = np.array(v.dims)
    (px, nx), (py, ny), (pz, nz) = (_lattice(d, stride) for d in v.dims)
    gz, gy, gx = np.meshgrid(pz, py, px, indexing="ij")
    centers = np.stack([gx.ravel(), gy.ravel(), gz.ravel()], axis=1)
    padded = pad_volume(v.data, side)
    err = np.empty(len(centers))
    for s in range(0, len(centers), batch_size):
        c = centers[s:s + batch_size]
        pred = net.forward(gather_patches(padded, c, side)[:, None]).astype(np.float64)
        err[s:s + batch_size] = np.linalg.norm(c / (dims - 1) - pred, axis=1)
    lat = err.reshape(len(pz), len(py), len(px))
    full = lat[np.ix_(nz, ny, nx)]
    return ErrorMap(np.clip(full, 0.0, SQRT3).astype(np.float32), "ppr")


def infer_error_map_ae(net, v):
    """Absolute reconstruction error ``|I - AE(I)|``."""
    if net.config.get("kind") != "ae":
        raise ConfigError("infer_error_map_ae needs an AE network")
    if v.data.shape != net.input_shape[1:]:
        raise ShapeError(f"volume shape {v.data.shape} does not match the network input {net.input_shape[1:]}")
    net.eval()
    rec = net.forward(v.data[None, None])[0, 0]
    return ErrorMap(np.clip(np.abs(v.data - rec), 0.0, 1.0).astype(np.float32), "ae")


def infer_error_map(net, v, stride=1):
    if net.config.get("kind") == "ae":
        return infer_error_map_ae(net, v)
    return infer_error_map_ppr(net, v, stride)


FILTERS = {"median": ndimage.median_filter, "grey_erosion": ndimage.grey_erosion}


def filter_error_map(emap, kind, k=5):
    """Median or grey-erosion filter with a ``k``-cube window and replicated borders."""
    kind = "grey_erosion" if kind == "erosion" else kind
    if kind not in FILTERS:
        raise ConfigError(f"unknown filter {kind!r}; expected median or grey_erosion")
    if k < 1 or k % 2 == 0:
        raise ConfigError(f"filter size must be a positive odd integer, got {k}")
    data = emap.data if isinstance(emap, ErrorMap) else np.asarray(emap)
    out = FILTERS[kind](data, size=k, mode="nearest")
    return ErrorMap(out, emap.kind) if isinstance(emap, ErrorMap) else out


def write_json(path, obj):
    with open(path, "w") as fh:
        json.dump(obj, fh, indent=1, sort_keys=True)
        fh.write("\n")
