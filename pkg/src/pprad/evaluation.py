"""Structure scores, ROC analysis, rater agreement and the two sweeps."""

import csv
import logging
import os
from dataclasses import dataclass, replace

import numpy as np
from scipy.stats import rankdata

from . import models, pipeline
from .errors import ConfigError, EvaluationError, FormatError, PPRError

log = logging.getLogger(__name__)

TASKS = ("ich", "fracture")
AE_FILTERS = {"ich": ("grey_erosion", 5), "fracture": ("median", 5)}


# ------------------------------------------------------------------- scoring

def parse_agg(agg):
    """``"max"``, ``"mean"``, ``"p99"`` or ``("percentile", q)`` to (name, q)."""
    if isinstance(agg, tuple):
        name, q = agg
    elif agg in ("max", "mean"):
        name, q = agg, None
    elif isinstance(agg, str) and agg.startswith("p") and agg[1:].replace(".", "", 1).isdigit():
        name, q = "percentile", float(agg[1:])
    else:
        raise ConfigError(f"unknown aggregator {agg!r}; expected max, mean or pNN")
    if name == "percentile" and not 0 <= q <= 100:
        raise ConfigError(f"percentile must be within [0, 100], got {q}")
    if name not in ("max", "mean", "percentile"):
        raise ConfigError(f"unknown aggregator {name!r}")
    return name, q


def structure_score(emap, mask, agg="p99"):
    """Aggregate of the error values inside ``mask`` (linear-interpolated percentiles)."""
    data = emap if isinstance(emap, np.ndarray) else np.asarray(getattr(emap, "data", emap))
    if mask.shape != data.shape:
        raise EvaluationError(f"mask shape {mask.shape} does not match map {data.shape}")
    vals = data[mask].astype(np.float64)
    if vals.size == 0:
        raise EvaluationError("structure mask is empty")
    name, q = parse_agg(agg)
    if name == "max":
        return float(vals.max())
    if name == "mean":
        return float(vals.mean())
    return float(np.percentile(vals, q))


# ------------------------------------------------------------------------ ROC

@dataclass
class RocCurve:
    fpr: np.ndarray
    tpr: np.ndarray
    thresholds: np.ndarray
    auroc: float

    def write_csv(self, path):
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["fpr", "tpr", "threshold"])
            for f, t, th in zip(self.fpr, self.tpr, self.thresholds):
                w.writerow([repr(float(f)), repr(float(t)), repr(float(th))])


def _check_binary(scores, labels):
    s = np.asarray(scores, dtype=np.float64)
    y = np.asarray(labels).astype(bool)
    if s.shape != y.shape or s.ndim != 1:
        raise EvaluationError(f"scores and labels must be equal-length vectors, got {s.shape} and {y.shape}")
    if not np.all(np.isfinite(s)):
        raise EvaluationError("scores must be finite")
    if y.all() or not y.any():
        raise EvaluationError("ROC analysis needs both positive and negative samples")
    return s, y


def rank_auroc(scores, labels):
    """P(score+ > score-) + P(tie) / 2 via midranks."""
    s, y = _check_binary(scores, labels)
    r = rankdata(s)
    n_pos, n_neg = int(y.sum()), int((~y).sum())
    return float((r[y].sum() - n_pos * (n_pos + 1) / 2) / (n_pos * n_neg))


def roc_curve(scores, labels):
    """ROC over every distinct score threshold; AUROC by the trapezoid rule.

    A sample is called positive when its score is at or above the threshold.
    The trapezoid area is checked against the rank statistic.
    """
    s, y = _check_binary(scores, labels)
    order = np.argsort(-s, kind="mergesort")
    s_sorted, y_sorted = s[order], y[order]
    last = np.r_[np.flatnonzero(np.diff(s_sorted)), len(s) - 1]
    tp = np.cumsum(y_sorted)[last]
    fp = np.cumsum(~y_sorted)[last]
    tpr = np.r_[0.0, tp / y.sum()]
    fpr = np.r_[0.0, fp / (~y).sum()]
    thr = np.r_[np.inf, s_sorted[last]]
    auc = float(np.sum(np.diff(fpr) * (tpr[1:] + tpr[:-1]) / 2))
    ref = rank_auroc(s, y)
    if abs(auc - ref) > 1e-9:
        raise EvaluationError(f"trapezoid AUROC {auc} disagrees with rank statistic {ref}")
    return RocCurve(fpr, tpr, thr, auc)


# ------------------------------------------------------------ rater agreement

def fleiss_kappa(counts, n_raters):
    """Fleiss' kappa of an items x categories count matrix."""
    M = np.asarray(counts, dtype=np.float64)
    if M.ndim != 2 or M.shape[0] < 2:
        raise EvaluationError("need a 2D count matrix with at least 2 items")
    if n_raters < 2:
        raise EvaluationError(f"need at least 2 raters, got {n_raters}")
    if np.any(M < 0) or np.any(M.sum(axis=1) != n_raters):
        raise EvaluationError(f"every item's counts must be nonnegative and sum to {n_raters}")
    N = M.shape[0]
    p_j = M.sum(axis=0) / (N * n_raters)
    P_i = (np.sum(M * M, axis=1) - n_raters) / (n_raters * (n_raters - 1))
    P_bar = P_i.mean()
    P_e = float(np.sum(p_j * p_j))
    if np.isclose(P_e, 1.0, rtol=0, atol=1e-15):
        raise EvaluationError("kappa undefined: every rating falls in one category")
    return float((P_bar - P_e) / (1 - P_e))


@dataclass
class RaterTable:
    """``ratings[feature]`` is a (cases, raters) boolean array."""
    ratings: dict

    def majority(self, feature):
        r = np.asarray(self.ratings[feature], dtype=bool)
        return r.sum(axis=1) * 2 > r.shape[1]

    def counts(self, feature):
        r = np.asarray(self.ratings[feature], dtype=bool)
        yes = r.sum(axis=1)
        return np.stack([r.shape[1] - yes, yes], axis=1)


def rater_vs_majority(table, feature):
    """Per-rater AUROC of the rater's 0/1 call against the majority vote, and their mean."""
    if feature not in table.ratings:
        raise EvaluationError(f"unknown feature {feature!r}")
    r = np.asarray(table.ratings[feature], dtype=bool)
    maj = table.majority(feature)
    aucs = [roc_curve(r[:, j].astype(float), maj).auroc for j in range(r.shape[1])]
    return aucs, float(np.mean(aucs))


# ------------------------------------------------------------- task scoring

@dataclass
class TaskResult:
    task: str
    roc: RocCurve
    scores: np.ndarray
    labels: np.ndarray
    aggregator: str
    filter: str

    def metrics(self):
        return {"task": self.task, "auroc": self.roc.auroc, "n_pos": int(self.labels.sum()),
                "n_neg": int((~self.labels).sum()), "aggregator": self.aggregator, "filter": self.filter}


def task_samples(maps, cases, agg="p99", filters=None):
    """(scores, labels) per task from error maps aligned with ``cases``.

    ICH pools one left and one right hemisphere sample per case; the
    fracture task scores the skull mask.  ``filters`` maps a task to
    ``(kind, k)`` applied to the map before scoring.
    """
    filters = filters or {}
    out = {t: ([], []) for t in TASKS}
    for emap, case in zip(maps, cases):
        if case.masks is None:
            raise EvaluationError(f"case {case.case_id} has no structure masks")
        per_task = {}
        for t in TASKS:
            if t in filters and filters[t] is not None:
                per_task[t] = pipeline.filter_error_map(emap, *filters[t])
            else:
                per_task[t] = emap
        for mask, lab in ((case.masks.hemisphere_left, case.label.bleeding_left),
                          (case.masks.hemisphere_right, case.label.bleeding_right)):
            if not mask.any():
                raise EvaluationError(f"case {case.case_id} has an empty hemisphere mask")
            out["ich"][0].append(structure_score(per_task["ich"], mask, agg))
            out["ich"][1].append(lab)
        if not case.masks.skull.any():
            raise EvaluationError(f"case {case.case_id} has an empty skull mask")
        out["fracture"][0].append(structure_score(per_task["fracture"], case.masks.skull, agg))
        out["fracture"][1].append(case.label.fracture)
    return {t: (np.array(s), np.array(l, dtype=bool)) for t, (s, l) in out.items()}


def _filter_name(spec):
    return "none" if spec is None else f"{spec[0]}:{spec[1]}"


def evaluate_maps(maps, cases, agg="p99", filters=None):
    filters = filters or {}
    samples = task_samples(maps, cases, agg, filters)
    return {t: TaskResult(t, roc_curve(*samples[t]), *samples[t], agg if isinstance(agg, str) else str(agg),
                          _filter_name(filters.get(t)))
            for t in TASKS}


def default_filters(kind, filter_ppr=False):
    return dict(AE_FILTERS) if kind == "ae" or filter_ppr else {}


def compute_maps(net, cases, stride=1):
    return [pipeline.infer_error_map(net, c.volume, stride) for c in cases]


def evaluate_tasks(net, cases, agg="p99", filters=None, stride=1, maps=None):
    """Infer maps for ``cases`` (unless given) and build one ROC per task."""
    if filters is None:
        filters = default_filters(net.config["kind"])
    if maps is None:
        maps = compute_maps(net, cases, stride)
    return evaluate_maps(maps, cases, agg, filters)


def write_results(results, out_dir, prefix=""):
    """``metrics.json`` plus ``roc_<task>.csv`` for each task."""
    os.makedirs(out_dir, exist_ok=True)
    for t, r in results.items():
        r.roc.write_csv(os.path.join(out_dir, f"{prefix}roc_{t}.csv"))
    pipeline.write_json(os.path.join(out_dir, f"{prefix}metrics.json"),
                        [results[t].metrics() for t in TASKS if t in results])


# --------------------------------------------------------------------- sweeps

@dataclass
class SweepConfig:
    train: pipeline.TrainConfig
    agg: str = "p99"
    stride: int = 1
    ae_epochs: int = None  # None reuses train.epochs


def _write_table(path, header, rows):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for r in rows:
            w.writerow([repr(v) if isinstance(v, float) else v for v in r])


PATCH_HEADER = ["s_p", "auroc_left", "auroc_right", "auroc_total", "auroc_fracture"]
MODEL_HEADER = ["model", "m", "params", "memory_bytes", "auroc_ich", "auroc_fracture"]


def _with_context(exc, ctx):
    """Same error class with ``ctx`` prefixed, for package errors; others pass through."""
    if isinstance(exc, PPRError) and not isinstance(exc, FormatError):
        return type(exc)(f"{ctx}: {exc}")
    return exc


def _check_unique(values, what):
    if len(set(values)) != len(values):
        raise ConfigError(f"duplicate {what} in sweep list: {values}")
    if not values:
        raise ConfigError(f"empty {what} list")


def patch_size_sweep(cfg, sizes, train_cases, test_cases, out_dir=None):
    """Train one PPR model per patch size; ICH AUROC per hemisphere and pooled."""
    sizes = list(sizes)
    _check_unique(sizes, "patch size")
    for s in sizes:
        models.build_ppr(cfg.train.m, s)  # validates before any training
    rows = []
    for s in sizes:
        tc = replace(cfg.train, model="ppr", s_p=s, lr=None if cfg.train.model != "ppr" else cfg.train.lr)
        sub = os.path.join(out_dir, f"sp_{s}") if out_dir else None
        if sub:
            os.makedirs(sub, exist_ok=True)
        try:
            net, _ = pipeline.train_ppr(train_cases, tc, sub)
            maps = compute_maps(net, test_cases, cfg.stride)
            samples = task_samples(maps, test_cases, cfg.agg)
        except Exception as exc:
            raise _with_context(exc, f"patch size {s}") from exc
        ich_s, ich_l = samples["ich"]
        left = roc_curve(ich_s[0::2], ich_l[0::2]).auroc if 0 < ich_l[0::2].sum() < len(ich_l[0::2]) else float("nan")
        right = roc_curve(ich_s[1::2], ich_l[1::2]).auroc if 0 < ich_l[1::2].sum() < len(ich_l[1::2]) else float("nan")
        total = roc_curve(ich_s, ich_l).auroc
        frac = roc_curve(*samples["fracture"]).auroc
        rows.append((s, left, right, total, frac))
        log.info("patch size %d: ICH %.3f fracture %.3f", s, total, frac)
    if out_dir:
        _write_table(os.path.join(out_dir, "patch_size_sweep.csv"), PATCH_HEADER, rows)
    return rows


def model_size_sweep(cfg, ms, train_cases, test_cases, out_dir=None, ae_batch=None):
    """Train PPR and AE for each ``m``; join AUROCs with size and memory accounting."""
    ms = list(ms)
    _check_unique(ms, "network size")
    if any(m < 1 for m in ms):
        raise ConfigError(f"every m must be >= 1, got {ms}")
    n = train_cases[0].volume.data.shape[0]
    rows = []
    for m in ms:
        for kind in ("ppr", "ae"):
            epochs = cfg.train.epochs if kind == "ppr" or cfg.ae_epochs is None else cfg.ae_epochs
            tc = replace(cfg.train, model=kind, m=m, epochs=epochs,
                         lr=cfg.train.lr if cfg.train.model == kind else None)
            sub = os.path.join(out_dir, f"{kind}_m{m}") if out_dir else None
            if sub:
                os.makedirs(sub, exist_ok=True)
            try:
                net, _ = pipeline.train(train_cases, tc, sub)
                res = evaluate_tasks(net, test_cases, cfg.agg, stride=cfg.stride)
            except Exception as exc:
                raise _with_context(exc, f"m={m} ({kind})") from exc
            if kind == "ppr":
                spec, batch = models.build_ppr(m, tc.s_p), tc.patches_per_volume
            else:
                spec, batch = models.build_ae(m, n), ae_batch or tc.volumes_per_batch
            est = models.estimate_memory(spec, batch)
            rows.append((kind, m, est.parameter_count, est.total_bytes,
                         res["ich"].roc.auroc, res["fracture"].roc.auroc))
            log.info("m=%d %s: ICH %.3f fracture %.3f", m, kind, rows[-1][4], rows[-1][5])
    if out_dir:
        _write_table(os.path.join(out_dir, "model_size_sweep.csv"), MODEL_HEADER, rows)
    return rows


def read_table(path):
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))
