"""Command-line entry point: synth, augment, train, eval, ablate.

Exit codes: 0 success, 2 configuration error, 3 data error, 4 numeric abort.
Logs go to stderr as one JSON object per line; artifacts go where flags say.
"""

from __future__ import annotations

import argparse
import csv
import io
import json
import logging
import sys
from pathlib import Path

import numpy as np

from ._jit import configure_threads
from .backbone import VARIANTS, canonical_variant
from .config import RunConfig
from .data import (
    AugmentSpec,
    DataError,
    SynthSpec,
    augment_dataset,
    load_dataset,
    save_dataset,
    split_dataset,
    synth_dataset,
)
from .evaluation import EvaluationError, evaluate
from .model import predict
from .plots import confusion_svg, map_curve_svg
from .tensor import ConfigurationError
from .training import NumericError, load_checkpoint, model_from_checkpoint, save_checkpoint, train

EXIT_OK, EXIT_CONFIG, EXIT_DATA, EXIT_NUMERIC = 0, 2, 3, 4

log = logging.getLogger("cetal")


class _JsonLines(logging.Formatter):
    def format(self, record):
        payload = record.msg if isinstance(record.msg, dict) else {"message": record.getMessage()}
        return json.dumps({"level": record.levelname.lower(), **payload}, sort_keys=True, default=str)


def _setup_logging(quiet):
    handler = logging.StreamHandler(sys.stderr)
    handler.setFormatter(_JsonLines())
    log.handlers[:] = [handler]
    log.setLevel(logging.WARNING if quiet else logging.INFO)
    log.propagate = False


def _emit(result):
    sys.stdout.write(json.dumps(result, sort_keys=True) + "\n")


# ---------------------------------------------------------------------------
# shared plumbing
# ---------------------------------------------------------------------------


def _datasets(cfg):
    """(train, val) per the data section, with augmentation on train only."""
    path = cfg.data["train"]
    if path is None:
        raise ConfigurationError("data.train (manifest path) is required")
    ds = load_dataset(path)
    if cfg.data["val"] is not None:
        train_set, val_set = ds, load_dataset(cfg.data["val"])
        if val_set.num_channels != train_set.num_channels:
            raise DataError(f"val set has {val_set.num_channels} channels, train set {train_set.num_channels}")
    elif cfg.data["val_fraction"] > 0:
        train_set, val_set = split_dataset(ds, cfg.data["val_fraction"], cfg.data["split_seed"])
    else:
        train_set, val_set = ds, None
    spec = cfg.augment_spec()
    if spec.permutations or spec.axis_normalize or spec.transforms:
        train_set = augment_dataset(train_set, spec, seed=cfg.training.seed)
    cfg.bind_dataset(ds.num_channels, ds.num_classes)
    return train_set, val_set


def _report(model, dataset, cfg_eval, infer_cfg, clip_length_s, overlap):
    preds = predict(model, list(dataset), infer_cfg, clip_length_s, overlap)
    return evaluate(
        preds,
        [s.segments for s in dataset],
        cfg_eval["thresholds"],
        model.cfg.num_classes,
        cfg_eval["confusion_threshold"],
        cfg_eval["confusion_min_score"],
        dataset.labels,
    )


def _fit(cfg, train_set, val_set, out_dir=None, resume=None, metrics=None):
    """Train under ``cfg``; returns the :class:`TrainResult`, checkpoints optional."""
    best = {"map": -1.0, "epoch": -1}
    if resume is not None:
        prior = resume.header.get("extra", {})
        best["map"] = float(prior.get("best_map", -1.0))
        best["epoch"] = int(prior.get("best_epoch", -1))

    def on_epoch_end(epoch, model, optimizer, history):
        rec = history[-1]
        if out_dir is None:
            return
        improved = "val_avg_map" in rec and rec["val_avg_map"] > best["map"]
        if improved:
            best["map"], best["epoch"] = rec["val_avg_map"], epoch
        extra = {"best_map": best["map"], "best_epoch": best["epoch"]}
        save_checkpoint(out_dir / "last.ckpt", model, optimizer, epoch, cfg.to_dict(), extra)
        if improved or val_set is None:
            save_checkpoint(out_dir / "best.ckpt", model, optimizer, epoch, cfg.to_dict(), extra)

    def on_log(rec):
        log.info(rec)
        if metrics is not None:
            metrics.write(json.dumps(rec, sort_keys=True) + "\n")
            metrics.flush()

    result = train(
        train_set,
        cfg.model,
        cfg.training,
        val_set=val_set,
        infer_cfg=cfg.inference,
        thresholds=cfg.eval["thresholds"],
        clip_length_s=cfg.data["clip_length_s"],
        overlap=cfg.data["overlap"],
        resume=resume,
        log=on_log,
        on_epoch_end=on_epoch_end,
    )
    if best["map"] > result.best_map:  # an earlier run segment holds the best weights
        result.best_map, result.best_epoch = best["map"], best["epoch"]
    return result


# ---------------------------------------------------------------------------
# subcommands
# ---------------------------------------------------------------------------


def cmd_synth(args):
    spec = SynthSpec(
        num_classes=args.classes,
        channels=args.channels,
        rate_hz=args.rate,
        num_sequences=args.sequences,
        length=args.length,
        seed=args.seed,
    )
    ds = synth_dataset(spec)
    try:
        path = save_dataset(ds, args.out)
    except OSError as exc:
        raise DataError(f"cannot write dataset to {args.out}: {exc}") from exc
    summary = {
        "manifest": str(path),
        "sequences": len(ds),
        "segments": sum(len(s.segments) for s in ds),
        "classes": ds.num_classes,
        "channels": ds.num_channels,
    }
    log.info({"event": "synth", **summary})
    _emit(summary)
    return EXIT_OK


def _parse_transform(text):
    op, _, param = text.partition(":")
    return (op, float(param)) if param else (op, None)


def cmd_augment(args):
    try:
        spec = AugmentSpec(args.permutations, args.normalize, [_parse_transform(t) for t in args.transform or []])
    except ValueError as exc:
        raise ConfigurationError(str(exc)) from exc
    ds = load_dataset(args.data)
    out = augment_dataset(ds, spec, seed=args.seed)
    path = save_dataset(out, args.out)
    summary = {"manifest": str(path), "input_sequences": len(ds), "sequences": len(out)}
    log.info({"event": "augment", **summary})
    _emit(summary)
    return EXIT_OK


def cmd_train(args):
    cfg = RunConfig.load(args.config, args.overrides)
    train_set, val_set = _datasets(cfg)
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    resume = None
    if args.resume:
        resume = load_checkpoint(args.resume)
        if resume.fingerprint != cfg.model.fingerprint():
            raise ConfigurationError(
                f"checkpoint fingerprint {resume.fingerprint} does not match config {cfg.model.fingerprint()}"
            )
        if resume.epoch + 1 >= cfg.training.epochs:
            raise ConfigurationError(f"checkpoint already finished epoch {resume.epoch}; raise training.epochs to continue")
    header = {
        "event": "header",
        "config": cfg.to_dict(),
        "fingerprint": cfg.model.fingerprint(),
        "train_sequences": len(train_set),
        "val_sequences": 0 if val_set is None else len(val_set),
        "start_epoch": 0 if resume is None else resume.epoch + 1,
    }
    log.info(header)
    with open(out_dir / "metrics.jsonl", "a" if resume else "w") as metrics:
        metrics.write(json.dumps(header, sort_keys=True) + "\n")
        result = _fit(cfg, train_set, val_set, out_dir, resume, metrics)
    summary = {
        "checkpoint": str(out_dir / "best.ckpt"),
        "last_checkpoint": str(out_dir / "last.ckpt"),
        "best_epoch": result.best_epoch,
        "best_val_avg_map": result.best_map if val_set is not None else None,
        "epochs_run": result.epochs_run,
    }
    log.info({"event": "done", **summary})
    _emit(summary)
    return EXIT_OK


def cmd_eval(args):
    ckpt = load_checkpoint(args.checkpoint)
    stored = ckpt.header.get("config") or {}
    model = model_from_checkpoint(ckpt)
    if args.config or args.overrides:
        cfg = RunConfig.load(args.config, args.overrides)
    else:
        cfg = RunConfig({k: v for k, v in stored.items() if k != "model"})
    ds = load_dataset(args.data)
    if ds.num_channels != model.cfg.input_channels:
        raise DataError(f"dataset has {ds.num_channels} channels, checkpoint expects {model.cfg.input_channels}")
    if args.config or args.overrides:
        wanted = cfg.bind_dataset(ds.num_channels, ds.num_classes).fingerprint()
        if wanted != ckpt.fingerprint:
            raise ConfigurationError(f"config fingerprint {wanted} does not match checkpoint {ckpt.fingerprint}")
    ev = dict(cfg.eval)
    if args.thresholds:
        ev["thresholds"] = [float(t) for t in args.thresholds.split(",")]
        RunConfig({"eval": ev})  # validate
    report = _report(model, ds, ev, cfg.inference, cfg.data["clip_length_s"], cfg.data["overlap"])
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    (out / "report.json").write_text(report.to_json())
    (out / "confusion.csv").write_text(report.confusion_csv())
    files = ["report.json", "confusion.csv"]
    if args.svg:
        labels = list(ds.labels or [str(c) for c in range(ds.num_classes)])
        (out / "map.svg").write_text(map_curve_svg(report.thresholds, {"mAP": report.map_per_threshold}))
        (out / "confusion.svg").write_text(confusion_svg(report.confusion, labels + ["background"]))
        files += ["map.svg", "confusion.svg"]
    summary = {"avg_map": report.avg_map, "map_per_threshold": report.map_per_threshold, "files": files}
    log.info({"event": "eval", **summary})
    _emit(summary)
    return EXIT_OK


def ablation_table(rows):
    """Comparison CSV: one row per (variant, clip length) with the delta against baseline."""
    base = {r["clip_length_s"]: r["avg_map"] for r in rows if r["variant"] == "baseline"}
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["variant", "clip_length_s", "seeds", "avg_map", "delta_vs_baseline"])
    for r in rows:
        cl = "full" if r["clip_length_s"] is None else f"{r['clip_length_s']:g}"
        delta = r["avg_map"] - base[r["clip_length_s"]]
        w.writerow([r["variant"], cl, r["seeds"], f"{r['avg_map']:.6f}", f"{delta:+.6f}"])
    return buf.getvalue()


def cmd_ablate(args):
    variants = []
    for name in args.variants.split(","):
        v = canonical_variant(name.strip())
        if v not in variants:
            variants.append(v)
    if "baseline" not in variants:
        variants.insert(0, "baseline")
    base_cfg = RunConfig.load(args.config, args.overrides)
    seeds = [int(s) for s in args.seeds.split(",")] if args.seeds else [base_cfg.training.seed]
    if args.clip_lengths:
        clips = [None if c in ("full", "none") else float(c) for c in args.clip_lengths.split(",")]
    else:
        clips = [base_cfg.data["clip_length_s"]]
    rows, details = [], []
    for clip in clips:
        for variant in variants:
            maps = []
            for seed in seeds:
                cfg = RunConfig.load(
                    args.config,
                    list(args.overrides)
                    + [f"model.variant={json.dumps(variant)}", f"training.seed={seed}", f"data.clip_length_s={json.dumps(clip)}"],
                )
                train_set, val_set = _datasets(cfg)
                if val_set is None:
                    raise ConfigurationError("ablation needs a validation set (data.val or data.val_fraction > 0)")
                result = _fit(cfg, train_set, val_set)
                model = result.model
                model.load_state_dict(result.best_state)
                report = _report(model, val_set, cfg.eval, cfg.inference, clip, cfg.data["overlap"])
                maps.append(report.avg_map)
                rec = {"event": "ablate_run", "variant": variant, "clip_length_s": clip, "seed": seed, "avg_map": report.avg_map}
                log.info(rec)
                details.append(rec)
            rows.append({"variant": variant, "clip_length_s": clip, "seeds": len(seeds), "avg_map": float(np.mean(maps))})
    table = ablation_table(rows)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    (out / "ablation.csv").write_text(table)
    (out / "ablation_runs.json").write_text(json.dumps(details, indent=1, sort_keys=True) + "\n")
    _emit({"table": str(out / "ablation.csv"), "rows": rows})
    return EXIT_OK


# ---------------------------------------------------------------------------
# argument parsing
# ---------------------------------------------------------------------------


def build_parser():
    p = argparse.ArgumentParser(prog="cetal", description="Channel-enhanced temporal action localization on sensor signals.")
    p.add_argument("--quiet", action="store_true", help="only log warnings and errors")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("synth", help="generate a synthetic channel-signature dataset")
    s.add_argument("--out", required=True)
    s.add_argument("--classes", type=int, default=4)
    s.add_argument("--channels", type=int, default=12)
    s.add_argument("--sequences", type=int, default=64)
    s.add_argument("--length", type=int, default=256)
    s.add_argument("--rate", type=float, default=50.0)
    s.add_argument("--seed", type=int, default=0)
    s.set_defaults(func=cmd_synth)

    a = sub.add_parser("augment", help="expand a dataset with axis permutations, normalization and transforms")
    a.add_argument("--data", required=True, help="input manifest")
    a.add_argument("--out", required=True)
    a.add_argument("--permutations", action="store_true")
    a.add_argument("--normalize", action="store_true")
    a.add_argument("--transform", action="append", help="op[:param], e.g. invert, noise:0.1, magnify:1.5")
    a.add_argument("--seed", type=int, default=0)
    a.set_defaults(func=cmd_augment)

    t = sub.add_parser("train", help="train a model from a JSON run config")
    t.add_argument("config", nargs="?", help="run config JSON")
    t.add_argument("overrides", nargs="*", help="section.key=value")
    t.add_argument("--out", required=True, help="directory for checkpoints and metrics.jsonl")
    t.add_argument("--resume", help="checkpoint to continue from")
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", help="evaluate a checkpoint on a dataset")
    e.add_argument("config", nargs="?", help="optional run config; its model must match the checkpoint")
    e.add_argument("overrides", nargs="*")
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--data", required=True, help="manifest to evaluate on")
    e.add_argument("--out", required=True)
    e.add_argument("--thresholds", help="comma-separated tIoU thresholds")
    e.add_argument("--svg", action="store_true", help="also write map.svg and confusion.svg")
    e.set_defaults(func=cmd_eval)

    b = sub.add_parser("ablate", help="train and compare variants; writes ablation.csv")
    b.add_argument("config", nargs="?")
    b.add_argument("overrides", nargs="*")
    b.add_argument("--variants", default=",".join(v for v in VARIANTS if v != "ce_bridged"))
    b.add_argument("--seeds", help="comma-separated seeds averaged per row")
    b.add_argument("--clip-lengths", help="comma-separated clip lengths in seconds ('full' for whole sequences)")
    b.add_argument("--out", required=True)
    b.set_defaults(func=cmd_ablate)
    return p


def _split_config_arg(args):
    # argparse cannot tell "config.json" from a first "key=value"; fix that up here
    if getattr(args, "config", None) and "=" in args.config and not args.config.endswith(".json"):
        args.overrides = [args.config] + list(args.overrides)
        args.config = None


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    _setup_logging(args.quiet)
    if hasattr(args, "overrides"):
        _split_config_arg(args)
    configure_threads()
    try:
        return args.func(args)
    except NumericError as exc:
        log.error({"event": "numeric_abort", "error": str(exc)})
        return EXIT_NUMERIC
    except (DataError, EvaluationError, OSError) as exc:
        log.error({"event": "data_error", "error": str(exc)})
        return EXIT_DATA
    except ConfigurationError as exc:
        log.error({"event": "config_error", "error": str(exc)})
        return EXIT_CONFIG
    except ValueError as exc:
        # remaining validation failures (bad synth spec, malformed checkpoint) are input errors
        log.error({"event": "config_error", "error": str(exc)})
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
