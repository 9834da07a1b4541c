"""Command-line entry point: ``vsdl generate | preprocess | train | evaluate | compare | infer``.

Every subcommand accepts ``--config FILE`` (JSON); explicit flags win over
the file. Exit status is 0 on success, 1 on bad input or configuration and
2 when training hits a non-finite value.
"""
from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
import time
from pathlib import Path

import numpy as np

from . import datapipe, evalkit, netblocks, phantom, trainer
from .errors import ConfigError, InputError, NumericError, VsdlError

log = logging.getLogger("vsdl")

SIDECAR_SUFFIX = ".json"


def _load_config(path) -> dict:
    if path is None:
        return {}
    p = Path(path)
    if not p.is_file():
        raise InputError(f"config file not found: {p}")
    try:
        cfg = json.loads(p.read_text())
    except ValueError as exc:
        raise ConfigError(f"{p}: invalid JSON ({exc})") from exc
    if not isinstance(cfg, dict):
        raise ConfigError(f"{p}: top level must be an object")
    return cfg


def _pick(args, cfg: dict, name: str, default=None):
    """Flag value if given, else config value, else default."""
    v = getattr(args, name, None)
    if v is not None:
        return v
    return cfg.get(name, default)


def _out_dir(args, cfg) -> Path:
    out = _pick(args, cfg, "out")
    if out is None:
        raise ConfigError("an output directory is required (--out)")
    p = Path(out)
    try:
        p.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise InputError(f"cannot create output directory {p}: {exc}") from exc
    return p


def _manifest(args, cfg) -> datapipe.DatasetManifest:
    data = _pick(args, cfg, "data")
    if data is None:
        raise ConfigError("a cohort directory or manifest is required (--data)")
    p = Path(data)
    if p.is_dir():
        p = p / "manifest.json"
    return datapipe.DatasetManifest.read(p)


def _sidecar(weights: Path) -> Path:
    return weights.with_name(weights.name + SIDECAR_SUFFIX)


def load_model(weights) -> netblocks.Network:
    """Network from a weight file and its ``<weights>.json`` sidecar (spec, seed, threshold)."""
    weights = Path(weights)
    side = _sidecar(weights)
    if not weights.is_file():
        raise InputError(f"weight file not found: {weights}")
    if not side.is_file():
        raise InputError(f"model description not found: {side}")
    try:
        meta = json.loads(side.read_text())
        spec = netblocks.ModelSpec.from_dict(meta["spec"])
    except (ValueError, KeyError, TypeError) as exc:
        raise InputError(f"{side}: unreadable model description ({exc})") from exc
    net = netblocks.load_weights(spec, weights)
    net.rng_seed = int(meta.get("seed", 0))
    thr = meta.get("threshold")
    net.threshold = None if thr is None else float(thr)
    return net


def _scores(net: netblocks.Network, stacks) -> tuple[list[str], np.ndarray, np.ndarray]:
    x, y = trainer.stack_arrays(stacks)
    return [s.id for s in stacks], trainer.predict_scores(net, x), y


# --- subcommands ------------------------------------------------------------

def cmd_generate(args, cfg) -> int:
    out = _out_dir(args, cfg)
    pdict = dict(cfg.get("phantom", {}))
    for flag, key in (("side", "side_px"), ("noise_std", "noise_std"), ("growth", "gap_growth_px_per_slice")):
        v = getattr(args, flag, None)
        if v is not None:
            pdict[key] = v
    params = phantom.params_from_dict(pdict)
    seed = int(_pick(args, cfg, "seed", 0))
    n_u = int(_pick(args, cfg, "n_unstable", 48))
    n_c = int(_pick(args, cfg, "n_control", 96))
    manifest = phantom.generate_cohort(out, n_u, n_c, params, seed=seed)
    counts = manifest.counts()
    print(f"cohort: {len(manifest.entries)} stacks ({n_u} unstable / {n_c} control) in {out}")
    for split in datapipe.SPLITS:
        print(f"  {split:<5} unstable {counts.get((1, split), 0):>3}   control {counts.get((0, split), 0):>3}")
    return 0


def cmd_preprocess(args, cfg) -> int:
    volume, meta = datapipe.read_volume(args.volume)
    plafond = int(_pick(args, cfg, "plafond", meta.get("plafond_index", 0)))
    spacing = _pick(args, cfg, "spacing", meta.get("spacing_mm"))
    if spacing is None:
        raise ConfigError("slice spacing unknown: pass --spacing or set spacing_mm in meta.json")
    side = int(_pick(args, cfg, "side", 224))
    stack = datapipe.prepare_stack(volume, plafond, float(spacing), side=side)
    stack.id = str(meta.get("id", Path(args.volume).name))
    if meta.get("label") is not None:
        stack.label = int(meta["label"])
    out = _out_dir(args, cfg)
    datapipe.write_stack(out, stack)
    print(f"wrote {len(stack)} slices of {side}x{side} to {out}")
    return 0


def _train_config(args, cfg, seed: int) -> trainer.TrainConfig:
    tdict = dict(cfg.get("train", {}))
    for flag, key in (("max_epochs", "max_epochs"), ("patience", "early_stop_patience"),
                      ("batch_size", "batch_size"), ("lr", "learning_rate"), ("min_delta", "min_delta")):
        v = getattr(args, flag, None)
        if v is not None:
            tdict[key] = v
    tdict.setdefault("seed", seed)
    return trainer.TrainConfig.from_dict(tdict)


def cmd_train(args, cfg) -> int:
    seed = int(_pick(args, cfg, "seed", 0))
    kind = netblocks.ModelKind.parse(_pick(args, cfg, "model", "dcnn-lstm"))
    manifest = _manifest(args, cfg)
    train_set = datapipe.load_split(manifest, "train")
    val_set = datapipe.load_split(manifest, "val")
    sdict = dict(cfg.get("spec", {}))
    sdict["kind"] = kind.value
    sdict.setdefault("input_side", train_set[0].side_px if train_set else 64)
    spec = netblocks.ModelSpec.from_dict(sdict)
    config = _train_config(args, cfg, seed)
    out = _out_dir(args, cfg)

    net = netblocks.build(spec, seed)
    net, hist = trainer.train(net, train_set, val_set, config)
    hist.write_csv(out / "history.csv")
    # operating point for infer: Youden threshold on the validation split
    _, vs, vy = _scores(net, val_set)
    threshold = evalkit.optimal_threshold(evalkit.roc(vs, vy)) if 0 < vy.sum() < len(vy) else 0.5
    weights = out / "weights.vsdl"
    netblocks.save_weights(net, weights)
    side = {"spec": spec.to_dict(), "seed": seed, "threshold": evalkit.json_float(threshold),
            "train": vars(config), "best_epoch": hist.best_epoch, "stopped_epoch": hist.stopped_epoch}
    _sidecar(weights).write_text(json.dumps(side, indent=2, sort_keys=True) + "\n")
    print(f"{kind.value}: {hist.stopped_epoch} epochs, best {hist.best_epoch} "
          f"(val loss {min(r.val_loss for r in hist.records):.4f}); "
          f"{hist.mean_epoch_seconds():.2f} s/epoch; weights in {weights}")
    return 0


def cmd_evaluate(args, cfg) -> int:
    net = load_model(args.weights)
    manifest = _manifest(args, cfg)
    split = _pick(args, cfg, "split", "test")
    ids, scores, labels = _scores(net, datapipe.load_split(manifest, split))
    thr = _pick(args, cfg, "threshold")
    report = evalkit.evaluate_scores(ids, scores, labels, threshold=None if thr is None else float(thr),
                                     model=net.kind.value)
    out = _out_dir(args, cfg)
    report.write_json(out / "report.json")
    curve = evalkit.roc(scores, labels)
    evalkit.write_roc_csv(curve, out / "roc.csv")
    (out / "roc.svg").write_text(evalkit.roc_svg({net.kind.value: curve}, f"ROC ({split})"))
    print(f"{net.kind.value} on the {split} split ({len(ids)} stacks)")
    print(report.table())
    return 0


def cmd_compare(args, cfg) -> int:
    runs = [Path(r) for r in (_pick(args, cfg, "runs") or [])]
    if not runs:
        raise ConfigError("compare needs at least one run directory (--runs)")
    manifest = _manifest(args, cfg)
    test = datapipe.load_split(manifest, "test")
    out = _out_dir(args, cfg)
    curves, histories, summary = {}, {}, {}
    for run in runs:
        weights = run / "weights.vsdl"
        if not weights.is_file():
            raise InputError(f"missing weights: {weights}")
        net = load_model(weights)
        name = net.kind.value
        if name in curves:
            raise ConfigError(f"two runs share model kind {name}")
        _, scores, labels = _scores(net, test)
        curves[name] = evalkit.roc(scores, labels)
        summary[name] = {"auc": evalkit.auc(curves[name]), "run": str(run)}
        hist_path = run / "history.csv"
        if hist_path.is_file():
            histories[name] = trainer.TrainHistory.read_csv(hist_path, name, netblocks.timesteps(net.spec))
    (out / "roc_compare.svg").write_text(evalkit.roc_svg(curves, "ROC, test split"))
    rows = trainer.epoch_time_report(histories)
    with open(out / "timing.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["model", "mean_seconds", "epochs", "timesteps"])
        for r in rows:
            w.writerow([r.model, f"{r.mean_seconds:.6f}", r.epochs, r.timesteps])
    (out / "compare.json").write_text(json.dumps(summary, indent=2, sort_keys=True) + "\n")
    for name, s in summary.items():
        print(f"{name:<12} AUC {s['auc']:.3f}")
    if rows:
        print()
        print(trainer.format_timing(rows))
    return 0


def cmd_infer(args, cfg) -> int:
    net = load_model(args.weights)
    stack = datapipe.read_stack(args.stack)
    t0 = time.perf_counter()
    score = float(net.predict(stack.slices[None])[0])
    seconds = time.perf_counter() - t0
    thr = _pick(args, cfg, "threshold", net.threshold)
    thr = 0.5 if thr is None else float(thr)
    cls = "unstable" if score >= thr else "control"
    print(f"score {score:.6f}")
    print(f"class {cls} (threshold {thr:.6g})")
    print(f"time {seconds:.3f} s")
    return 0


# --- argument parsing -------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="vsdl", description=__doc__.splitlines()[0])
    ap.add_argument("-v", "--verbose", action="store_true", help="log per-epoch progress")
    sub = ap.add_subparsers(dest="command", required=True)

    def common(p, out=True):
        p.add_argument("--config", help="JSON config file; flags override its values")
        p.add_argument("--seed", type=int)
        if out:
            p.add_argument("--out", help="output directory")

    p = sub.add_parser("generate", help="write a synthetic phantom cohort")
    common(p)
    p.add_argument("--n-unstable", type=int, dest="n_unstable")
    p.add_argument("--n-control", type=int, dest="n_control")
    p.add_argument("--side", type=int, help="slice edge in pixels")
    p.add_argument("--noise-std", type=float, dest="noise_std")
    p.add_argument("--growth", type=float, help="unstable gap growth in px per slice")
    p.set_defaults(func=cmd_generate)

    p = sub.add_parser("preprocess", help="turn a raw slice volume into a 13-slice stack")
    common(p)
    p.add_argument("--volume", required=True, help="directory of slice_*.pgm plus meta.json")
    p.add_argument("--plafond", type=int)
    p.add_argument("--spacing", type=float, help="inter-slice spacing in mm")
    p.add_argument("--side", type=int)
    p.set_defaults(func=cmd_preprocess)

    p = sub.add_parser("train", help="train one model on a cohort")
    common(p)
    p.add_argument("--data", help="cohort directory or manifest.json")
    p.add_argument("--model", help="cnn3d, cnn-lstm or dcnn-lstm")
    p.add_argument("--max-epochs", type=int, dest="max_epochs")
    p.add_argument("--patience", type=int)
    p.add_argument("--min-delta", type=float, dest="min_delta")
    p.add_argument("--batch-size", type=int, dest="batch_size")
    p.add_argument("--lr", type=float)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("evaluate", help="score a split and write report, ROC CSV and SVG")
    common(p)
    p.add_argument("--data")
    p.add_argument("--weights", required=True)
    p.add_argument("--split", choices=datapipe.SPLITS)
    p.add_argument("--threshold", type=float, help="fixed operating threshold")
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("compare", help="combined ROC plot and epoch-time table")
    common(p)
    p.add_argument("--data")
    p.add_argument("--runs", nargs="+", help="training output directories")
    p.set_defaults(func=cmd_compare)

    p = sub.add_parser("infer", help="classify one stack directory")
    common(p, out=False)
    p.add_argument("--weights", required=True)
    p.add_argument("--stack", required=True)
    p.add_argument("--threshold", type=float)
    p.set_defaults(func=cmd_infer)
    return ap


def main(argv=None) -> int:
    ap = build_parser()
    args = ap.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(message)s")
    try:
        cfg = _load_config(args.config)
        return args.func(args, cfg)
    except NumericError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except (VsdlError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
