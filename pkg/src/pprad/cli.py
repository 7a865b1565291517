"""Command-line entry point: ``pprad <command> [options]``.

Every command also accepts ``--config FILE`` (a JSON object keyed by option
name, dashes or underscores).  Flags override file values and the resolved
configuration is written next to the outputs, so a run can be replayed with
``--config resolved_config.json``.

Exit codes: 0 success, 1 runtime or numeric failure, 2 configuration error.
"""

import argparse
import json
import logging
import os
import sys

import numpy as np

from . import evaluation, models, pipeline, plots
from .errors import ConfigError, PPRError, ShapeError
from .volumes import (ManifestEntry, PhantomConfig, equalize_histogram, generate_phantom,
                      read_manifest, read_volume, write_manifest, write_volume)

log = logging.getLogger("pprad")

# healthy hold-out fraction (21 of 132 healthy cases)
TEST_FRACTION = 21 / 132
OUT_ENV = "PPRAD_OUT"

DEFAULTS = {
    "gen-data": dict(out=None, n_healthy=48, n_ich=12, n_fracture=8, size=64, seed=7,
                     test_fraction=TEST_FRACTION, anomaly_radius_frac=0.08, n_bins=256,
                     equalize=True, force=False),
    "train": dict(model="ppr", data=None, m=2, patch_size=19, epochs=200, lr=None, seed=7, out=None,
                  patches_per_volume=256, volumes_per_batch=4, checkpoint_every=0, sn_iters=1),
    "infer": dict(ckpt=None, volume=None, stride=1, filter="none", k=5, out=None, patch_size=None),
    "eval": dict(ckpt=None, data=None, agg="p99", out=None, stride=1, patch_size=None,
                 filter_ppr=False, save_maps=False),
    "sweep": dict(kind=None, config=None, out=None),
    "report": dict(runs=None, out=None),
}
REQUIRED = {"gen-data": ["out"], "train": ["data", "out"], "infer": ["ckpt", "volume", "out"],
            "eval": ["ckpt", "data", "out"], "sweep": ["kind", "config", "out"], "report": ["runs", "out"]}


def _default_out(cmd):
    root = os.environ.get(OUT_ENV)
    return os.path.join(root, cmd) if root else None


def build_parser():
    p = argparse.ArgumentParser(prog="pprad", description="Patch position regression anomaly detection")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    def cmd(name, help):
        sp = sub.add_parser(name, help=help, argument_default=None)
        if name != "sweep":
            sp.add_argument("--config", help="JSON file of option values")
        return sp

    g = cmd("gen-data", "write a synthetic phantom dataset and manifest")
    g.add_argument("--out")
    g.add_argument("--n-healthy", type=int)
    g.add_argument("--n-ich", type=int)
    g.add_argument("--n-fracture", type=int)
    g.add_argument("--size", type=int)
    g.add_argument("--seed", type=int)
    g.add_argument("--test-fraction", type=float)
    g.add_argument("--anomaly-radius-frac", type=float)
    g.add_argument("--n-bins", type=int)
    g.add_argument("--no-equalize", dest="equalize", action="store_const", const=False)
    g.add_argument("--force", action="store_const", const=True)

    t = cmd("train", "train a PPR or AE model on the train split")
    t.add_argument("--model", choices=["ppr", "ae"])
    t.add_argument("--data")
    t.add_argument("--m", type=int)
    t.add_argument("--patch-size", type=int)
    t.add_argument("--epochs", type=int)
    t.add_argument("--lr", type=float)
    t.add_argument("--seed", type=int)
    t.add_argument("--out")
    t.add_argument("--patches-per-volume", type=int)
    t.add_argument("--volumes-per-batch", type=int)
    t.add_argument("--checkpoint-every", type=int)
    t.add_argument("--sn-iters", type=int)

    i = cmd("infer", "compute an error map for one volume")
    i.add_argument("--ckpt")
    i.add_argument("--volume")
    i.add_argument("--stride", type=int)
    i.add_argument("--filter", choices=["none", "median", "erosion"])
    i.add_argument("--k", type=int)
    i.add_argument("--out")
    i.add_argument("--patch-size", type=int)

    e = cmd("eval", "score the test split and emit ROC curves")
    e.add_argument("--ckpt")
    e.add_argument("--data")
    e.add_argument("--agg")
    e.add_argument("--out")
    e.add_argument("--stride", type=int)
    e.add_argument("--patch-size", type=int)
    e.add_argument("--filter-ppr", action="store_const", const=True)
    e.add_argument("--save-maps", action="store_const", const=True)

    s = cmd("sweep", "patch-size or model-size sweep")
    s.add_argument("--kind", choices=["patch-size", "model-size"])
    s.add_argument("--config")
    s.add_argument("--out")

    r = cmd("report", "join evaluated runs into a comparison table")
    r.add_argument("--runs", nargs="+")
    r.add_argument("--out")
    return p


def resolve(cmd, args):
    """Defaults, then the ``--config`` file, then explicit flags."""
    cfg = dict(DEFAULTS[cmd])
    if cmd != "sweep" and getattr(args, "config", None):
        try:
            with open(args.config) as fh:
                filed = json.load(fh)
        except (OSError, json.JSONDecodeError) as exc:
            raise ConfigError(f"cannot read config {args.config}: {exc}") from None
        for k, v in filed.items():
            key = k.replace("-", "_")
            if key not in cfg:
                raise ConfigError(f"unknown option {k!r} in {args.config}")
            cfg[key] = v
    for k in cfg:
        v = getattr(args, k, None)
        if v is not None:
            cfg[k] = v
    if cfg.get("out") is None:
        cfg["out"] = _default_out(cmd)
    missing = [k for k in REQUIRED[cmd] if cfg.get(k) is None]
    if missing:
        raise ConfigError(f"{cmd}: missing required option(s) " + ", ".join("--" + m.replace("_", "-") for m in missing))
    return cfg


def _persist(cfg, path):
    pipeline.write_json(path, cfg)


# ------------------------------------------------------------------- commands

def case_seed(seed, i):
    return int(np.random.SeedSequence([seed, i]).generate_state(1, np.uint64)[0])


def cmd_gen_data(cfg):
    out = cfg["out"]
    if os.path.isdir(out) and os.listdir(out) and not cfg["force"]:
        raise ConfigError(f"output directory {out} is not empty (use --force)")
    for k in ("n_healthy", "n_ich", "n_fracture"):
        if cfg[k] < 0:
            raise ConfigError(f"{k} must be >= 0")
    if cfg["size"] < 32:
        raise ConfigError(f"size must be >= 32, got {cfg['size']}")
    if not 0 <= cfg["test_fraction"] <= 1:
        raise ConfigError("test_fraction must lie in [0, 1]")
    os.makedirs(out, exist_ok=True)
    nh = cfg["n_healthy"]
    n_test = int(round(nh * cfg["test_fraction"]))
    if nh >= 2:
        n_test = min(max(n_test, 1), nh - 1)
    plan = [("healthy", "none", "train" if i < nh - n_test else "test") for i in range(nh)]
    plan += [("ich", "blob_left" if i % 2 == 0 else "blob_right", "test") for i in range(cfg["n_ich"])]
    plan += [("fracture", "shell_break", "test") for _ in range(cfg["n_fracture"])]
    entries = []
    counters = {}
    for i, (group, anomaly, split) in enumerate(plan):
        j = counters.get(group, 0)
        counters[group] = j + 1
        pc = PhantomConfig(cfg["size"], case_seed(cfg["seed"], i), anomaly, cfg["anomaly_radius_frac"])
        vol, masks, label = generate_phantom(pc)
        if cfg["equalize"]:
            vol = equalize_histogram(vol, cfg["n_bins"], masks.foreground)
        name = f"{group}_{j:03d}.vol"
        write_volume(vol, os.path.join(out, name), masks)
        entries.append(ManifestEntry(name, label, split))
    write_manifest(entries, os.path.join(out, "manifest.json"))
    _persist(cfg, os.path.join(out, "resolved_config.json"))
    n_train = sum(e.split == "train" for e in entries)
    print(f"wrote {len(entries)} volumes ({n_train} train, {len(entries) - n_train} test) to {out}")


def _train_config(cfg):
    return pipeline.TrainConfig(model=cfg["model"], epochs=cfg["epochs"], lr=cfg["lr"], m=cfg["m"],
                                s_p=cfg["patch_size"], patches_per_volume=cfg["patches_per_volume"],
                                volumes_per_batch=cfg["volumes_per_batch"], seed=cfg["seed"],
                                checkpoint_every=cfg["checkpoint_every"], sn_iters=cfg["sn_iters"])


def cmd_train(cfg):
    tc = _train_config(cfg)
    cases = pipeline.load_cases(read_manifest(cfg["data"]), split="train")
    os.makedirs(cfg["out"], exist_ok=True)
    _persist(dict(cfg, lr=tc.lr), os.path.join(cfg["out"], "resolved_config.json"))
    net, hist = pipeline.train(cases, tc, cfg["out"])
    print(f"trained {tc.model} (m={tc.m}) for {len(hist)} epochs, final loss {hist.loss[-1]:.5f}")


def _load(cfg):
    net, header = pipeline.load_network(cfg["ckpt"])
    ps = cfg.get("patch_size")
    if ps is not None:
        if net.config["kind"] != "ppr":
            raise ConfigError("--patch-size only applies to PPR checkpoints")
        if ps != net.config["input_side"]:
            raise ConfigError(f"checkpoint was trained with patch size {net.config['input_side']}, "
                              f"requested {ps}")
    return net, header


def cmd_infer(cfg):
    net, _ = _load(cfg)
    vol, _ = read_volume(cfg["volume"])
    emap = pipeline.infer_error_map(net, vol, cfg["stride"])
    if cfg["filter"] != "none":
        emap = pipeline.filter_error_map(emap, cfg["filter"], cfg["k"])
    parent = os.path.dirname(os.path.abspath(cfg["out"]))
    os.makedirs(parent, exist_ok=True)
    write_volume(emap.as_volume(), cfg["out"])
    _persist(cfg, cfg["out"] + ".config.json")
    d = emap.data
    print(f"error map min {d.min():.6f} mean {d.mean():.6f} max {d.max():.6f}")


def cmd_eval(cfg):
    net, header = _load(cfg)
    cases = pipeline.load_cases(read_manifest(cfg["data"]), split="test")
    kind = net.config["kind"]
    filters = evaluation.default_filters(kind, cfg["filter_ppr"])
    evaluation.parse_agg(cfg["agg"])
    out = cfg["out"]
    os.makedirs(out, exist_ok=True)
    _persist(cfg, os.path.join(out, "resolved_config.json"))
    maps = evaluation.compute_maps(net, cases, cfg["stride"])
    if cfg["save_maps"]:
        mdir = os.path.join(out, "maps")
        os.makedirs(mdir, exist_ok=True)
        for c, m in zip(cases, maps):
            write_volume(m.as_volume(), os.path.join(mdir, f"{c.case_id}.vol"))
    results = evaluation.evaluate_tasks(net, cases, cfg["agg"], filters, maps=maps)
    evaluation.write_results(results, out)
    for t, r in results.items():
        plots.roc_plot(os.path.join(out, f"roc_{t}.svg"), r.roc, f"{kind.upper()} {t} ROC")
    spec = models.spec_from_config(net.config)
    batch = header.get("train", {}).get("patches_per_volume" if kind == "ppr" else "volumes_per_batch")
    batch = batch or (256 if kind == "ppr" else 4)
    est = models.estimate_memory(spec, batch)
    pipeline.write_json(os.path.join(out, "model.json"),
                        {"kind": kind, "m": net.config["m"], "input_side": net.config["input_side"],
                         "params": est.parameter_count, "batch": batch, "memory_bytes": est.total_bytes})
    for t, r in results.items():
        print(f"{t}: AUROC {r.roc.auroc:.4f} (pos {int(r.labels.sum())}, neg {int((~r.labels).sum())})")


def _load_sweep_config(path):
    try:
        with open(path) as fh:
            raw = json.load(fh)
    except (OSError, json.JSONDecodeError) as exc:
        raise ConfigError(f"cannot read sweep config {path}: {exc}") from None
    if "data" not in raw:
        raise ConfigError("sweep config needs a 'data' manifest path")
    base = os.path.dirname(os.path.abspath(path))
    data = os.path.join(base, raw["data"])
    train = dict(DEFAULTS["train"])
    for k, v in raw.get("train", {}).items():
        key = k.replace("-", "_")
        if key not in train:
            raise ConfigError(f"unknown train option {k!r} in sweep config")
        train[key] = v
    return raw, data, train


def cmd_sweep(cfg):
    raw, data, train = _load_sweep_config(cfg["config"])
    sc = evaluation.SweepConfig(_train_config(train), raw.get("agg", "p99"), raw.get("stride", 1),
                                raw.get("ae_epochs"))
    entries = read_manifest(data)
    train_cases = pipeline.load_cases(entries, "train")
    test_cases = pipeline.load_cases(entries, "test")
    out = cfg["out"]
    os.makedirs(out, exist_ok=True)
    _persist(dict(cfg, resolved=raw), os.path.join(out, "resolved_config.json"))
    if cfg["kind"] == "patch-size":
        sizes = raw.get("sizes", [19, 23, 27])
        rows = evaluation.patch_size_sweep(sc, sizes, train_cases, test_cases, out)
        tot = [r[3] for r in rows]
        plots.line_plot(os.path.join(out, "patch_size_sweep.svg"),
                        [("ICH total", sizes, tot), ("ICH left", sizes, [r[1] for r in rows]),
                         ("ICH right", sizes, [r[2] for r in rows])],
                        title="AUROC vs patch size", xlabel="patch size", ylabel="AUROC", ylim=(0.0, 1.0))
        spread = (max(tot) - min(tot)) / 2
        pipeline.write_json(os.path.join(out, "spread.json"),
                            {"auroc_total_min": min(tot), "auroc_total_max": max(tot), "half_range": spread})
        print(f"combined ICH AUROC over sizes {sizes}: {min(tot):.3f}..{max(tot):.3f} (+/-{spread:.3f})")
    else:
        ms = raw.get("ms", [1, 2, 4])
        rows = evaluation.model_size_sweep(sc, ms, train_cases, test_cases, out)
        series = []
        for kind in ("ppr", "ae"):
            sel = [r for r in rows if r[0] == kind]
            series.append((f"{kind} ICH", [r[2] for r in sel], [r[4] for r in sel]))
            series.append((f"{kind} fracture", [r[2] for r in sel], [r[5] for r in sel]))
        plots.line_plot(os.path.join(out, "model_size_sweep.svg"), series, title="AUROC vs parameter count",
                        xlabel="parameters", ylabel="AUROC", ylim=(0.0, 1.0))
        for r in rows:
            print(f"{r[0]} m={r[1]}: params {r[2]} ICH {r[4]:.3f} fracture {r[5]:.3f}")


REPORT_HEADER = ["run", "kind", "m", "params", "batch", "memory_mb", "auroc_ich", "auroc_fracture"]


def cmd_report(cfg):
    rows = []
    for run in cfg["runs"]:
        try:
            with open(os.path.join(run, "model.json")) as fh:
                model = json.load(fh)
            with open(os.path.join(run, "metrics.json")) as fh:
                metrics = {m["task"]: m for m in json.load(fh)}
        except (OSError, json.JSONDecodeError, KeyError, TypeError) as exc:
            raise ConfigError(f"run {run} lacks evaluation outputs: {exc}") from None
        rows.append([os.path.basename(os.path.normpath(run)), model["kind"], model["m"], model["params"],
                     model["batch"], round(model["memory_bytes"] / 2 ** 20, 3),
                     round(metrics["ich"]["auroc"], 6), round(metrics["fracture"]["auroc"], 6)])
    rows.sort(key=lambda r: (r[1], r[2], r[0]))
    out = cfg["out"]
    os.makedirs(out, exist_ok=True)
    evaluation._write_table(os.path.join(out, "report.csv"), REPORT_HEADER, rows)
    cells = [REPORT_HEADER] + [[str(c) for c in r] for r in rows]
    widths = [max(len(row[i]) for row in cells) for i in range(len(REPORT_HEADER))]
    text = "\n".join("  ".join(c.rjust(w) for c, w in zip(row, widths)) for row in cells) + "\n"
    with open(os.path.join(out, "report.txt"), "w") as fh:
        fh.write(text)
    _persist(cfg, os.path.join(out, "resolved_config.json"))
    print(text, end="")


COMMANDS = {"gen-data": cmd_gen_data, "train": cmd_train, "infer": cmd_infer, "eval": cmd_eval,
            "sweep": cmd_sweep, "report": cmd_report}


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(name)s %(message)s")
    try:
        cfg = resolve(args.command, args)
        COMMANDS[args.command](cfg)
    except (ConfigError, ShapeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except (PPRError, OSError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
