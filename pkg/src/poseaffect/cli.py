"""Command-line entry points: ``ingest``, ``train``, ``eval`` and ``predict``.

Exit codes: 0 ok, 2 usage or configuration problem, 3 no usable data,
4 numeric failure during training. Set ``POSEAFFECT_LOG`` (e.g. ``DEBUG``)
to change log verbosity.
"""
from __future__ import annotations

import argparse
import logging
import os
import sys
from functools import partial
from pathlib import Path

import numpy as np

from . import config as config_mod
from .dataset import (LabelFileError, Manifest, ManifestError, batch_iter, build_manifest, class_histogram,
                      load_manifest, save_manifest, split_train_val, subsample)
from .emotion_space import EMOTION_NAMES, Emotion, VAThresholds, va_to_class
from .keypoint_io import (DEFAULT_FRAME_PATTERN, KeypointError, NormalizationConfig, frame_index_from_name,
                          load_feature, parse_frame, select_person, to_feature_vector)
from .nn_core import CheckpointError, forward, load_checkpoint, predict_class, save_checkpoint
from .training import NonFiniteLoss, evaluate, fit

log = logging.getLogger("poseaffect")

EXIT_OK, EXIT_USAGE, EXIT_EMPTY, EXIT_NUMERIC = 0, 2, 3, 4


class CliError(Exception):
    def __init__(self, message: str, code: int = EXIT_USAGE):
        super().__init__(message)
        self.code = code


def _norm_to_meta(norm: NormalizationConfig) -> dict:
    return {"anchor": norm.anchor, "image_diagonal": norm.image_diagonal, "use_confidence": norm.use_confidence}


def _norm_from_meta(meta: dict) -> NormalizationConfig:
    n = meta.get("normalization", {})
    return NormalizationConfig(anchor=n.get("anchor", 1), image_diagonal=n.get("image_diagonal", NormalizationConfig.image_diagonal),
                               use_confidence=n.get("use_confidence", True))


def load_split(m: Manifest, task: str, norm: NormalizationConfig, min_validity: float, workers: int = 1):
    """Features and labels of every record usable for ``task``."""
    if task == "classify":
        m = Manifest([r for r in m.records if r.expr_label is not None], m.meta)
    else:
        m = Manifest([r for r in m.records if r.va_label is not None], m.meta)
    stream = batch_iter(m, batch_size=max(len(m), 1), loader=partial(load_feature, cfg=norm),
                        min_validity=min_validity, workers=workers)
    batches = list(stream)
    if stream.skipped:
        log.info("skipped %d of %d samples (unreadable or below min_validity)", stream.skipped, len(m))
    if not batches:
        width = norm.feature_dim()
        return np.zeros((0, width)), np.zeros((0,) if task == "classify" else (0, 2))
    b = batches[0]
    return b.x, (b.expr if task == "classify" else b.va)


def cmd_ingest(args) -> int:
    root, labels = Path(args.root), Path(args.labels)
    for p, flag in ((root, "--root"), (labels, "--labels")):
        if not p.is_dir():
            raise CliError(f"{flag}: {p} is not a directory")
    try:
        m, skips = build_manifest(root, labels, pattern=args.pattern)
    except LabelFileError as e:
        raise CliError(str(e)) from None
    try:
        m = subsample(m, args.stride)
    except ValueError as e:
        raise CliError(str(e)) from None
    if len(m) == 0:
        raise CliError(f"no usable samples ({skips.total} skipped: {dict(skips.counts)})", EXIT_EMPTY)
    try:
        m = split_train_val(m, args.val_fraction, args.seed)
    except (ValueError, ManifestError) as e:
        raise CliError(str(e)) from None
    save_manifest(m, args.out)

    print(f"manifest: {args.out} ({len(m)} records, {skips.total} skipped)")
    for reason, n in sorted(skips.counts.items()):
        print(f"skipped.{reason} = {n}")
    for split in ("train", "val"):
        part = m.by_split(split)
        print(f"split.{split} = {len(part)} records, {len(part.video_ids())} videos")
        hist = class_histogram(part)
        print(f"classes.{split} = " + " ".join(f"{name}:{c}" for name, c in zip(EMOTION_NAMES, hist)))
    return EXIT_OK


def _write_log(path: Path, history):
    cols = list(history[0].as_dict()) if history else ["epoch"]
    lines = ["\t".join(cols)]
    for rec in history:
        d = rec.as_dict()
        lines.append("\t".join(repr(d[c]) if isinstance(d[c], float) else str(d[c]) for c in cols))
    path.write_text("\n".join(lines) + "\n", encoding="utf-8")


def cmd_train(args) -> int:
    overrides = {}
    for item in args.set or []:
        key, sep, value = item.partition("=")
        if not sep:
            raise CliError(f"--set expects key=value, got {item!r}")
        overrides[key.strip()] = value.strip()
    try:
        cfg = config_mod.load_config(args.config, overrides)
        tcfg = config_mod.train_config(cfg)
        thresholds = config_mod.va_thresholds(cfg)
    except (OSError, config_mod.ConfigError) as e:
        raise CliError(str(e)) from None
    for key in config_mod.REQUIRED_PATHS:
        if not cfg[key]:
            raise CliError(f"missing required config key: {key}")
    try:
        tcfg.network_spec(1)
        tcfg.make_optimizer()
    except ValueError as e:
        raise CliError(str(e)) from None

    try:
        m = load_manifest(cfg["manifest"])
    except (OSError, ManifestError) as e:
        raise CliError(f"cannot read manifest: {e}") from None
    norm = config_mod.normalization_config(cfg)
    tx, ty = load_split(m.by_split("train"), tcfg.task, norm, cfg["min_validity"], cfg["workers"])
    vx, vy = load_split(m.by_split("val"), tcfg.task, norm, cfg["min_validity"], cfg["workers"])
    if len(tx) == 0 or len(vx) == 0:
        raise CliError(f"empty data: {len(tx)} train and {len(vx)} val samples usable", EXIT_EMPTY)

    try:
        result = fit(tcfg, tx, ty, vx, vy)
    except NonFiniteLoss as e:
        raise CliError(str(e), EXIT_NUMERIC) from None
    except ValueError as e:
        raise CliError(str(e)) from None

    meta = {
        "task": tcfg.task,
        "normalization": _norm_to_meta(norm),
        "min_validity": cfg["min_validity"],
        "neutral_radius": thresholds.neutral_radius,
        "prototypes": {Emotion(k).label: list(v) for k, v in thresholds.prototypes.items()},
        "best_epoch": result.best_epoch,
        "best_score": result.best_score,
        "seed": tcfg.seed,
    }
    ckpt = Path(cfg["checkpoint_out"])
    save_checkpoint(ckpt, result.spec, result.params, meta)
    log_path = Path(cfg["log_out"]) if cfg["log_out"] else ckpt.with_name(ckpt.name + ".log.tsv")
    _write_log(log_path, result.history)
    print(f"checkpoint: {ckpt} (best epoch {result.best_epoch}, score {result.best_score:.6f})")
    print(f"log: {log_path}")
    return EXIT_OK


def _load_ckpt(path):
    try:
        return load_checkpoint(path)
    except (OSError, CheckpointError, ValueError, KeyError) as e:
        raise CliError(f"cannot load checkpoint {path}: {e}") from None


def cmd_eval(args) -> int:
    spec, params, meta = _load_ckpt(args.checkpoint)
    task = meta.get("task", "classify" if spec.head == "classifier7" else "va")
    norm = _norm_from_meta(meta)
    if norm.feature_dim() != spec.input_dim:
        raise CliError(f"checkpoint expects {spec.input_dim} inputs but the feature layout yields {norm.feature_dim()}")
    try:
        m = load_manifest(args.manifest)
    except (OSError, ManifestError) as e:
        raise CliError(f"cannot read manifest: {e}") from None
    x, y = load_split(m.by_split(args.split), task, norm, meta.get("min_validity", 0.5))
    if len(x) == 0:
        raise CliError(f"split {args.split!r} has no usable samples", EXIT_EMPTY)
    if x.shape[1] != spec.input_dim:
        raise CliError(f"features have {x.shape[1]} values, checkpoint expects {spec.input_dim}")
    if task == "va" and len(x) < 2:
        raise CliError("CCC needs at least 2 samples", EXIT_EMPTY)

    loss, report = evaluate(params, spec, task, x, y)
    report.extra.update(task=task, split=args.split, n_samples=int(len(x)), loss=float(loss))
    print(report.to_text())
    line = report.to_json_line()
    if args.report_out:
        with open(args.report_out, "a", encoding="utf-8") as f:
            f.write(line + "\n")
    else:
        print(line)
    return EXIT_OK


def _frame_files(target: Path) -> list[Path]:
    if target.is_dir():
        return sorted(target.glob("*.json"))
    return [target]


def cmd_predict(args) -> int:
    spec, params, meta = _load_ckpt(args.checkpoint)
    task = meta.get("task", "classify" if spec.head == "classifier7" else "va")
    norm = _norm_from_meta(meta)
    min_validity = meta.get("min_validity", 0.5)
    thresholds = VAThresholds(
        neutral_radius=meta.get("neutral_radius", 0.15),
        prototypes={Emotion[name.upper()]: tuple(pt) for name, pt in meta["prototypes"].items()},
    ) if "prototypes" in meta else VAThresholds()

    files = []
    for t in args.paths:
        if not Path(t).exists():
            print(f"{t}\terror\tno such file or directory")
            continue
        files.extend(_frame_files(Path(t)))
    ok = 0
    for path in files:
        index = frame_index_from_name(path.name, DEFAULT_FRAME_PATTERN)
        frame_id = f"{path.parent.name}/{index}" if index is not None else path.name
        try:
            frame = parse_frame(path.read_bytes())
        except (OSError, KeypointError) as e:
            print(f"{frame_id}\terror\t{e}")
            continue
        ok += 1
        person = select_person(frame)
        feat = to_feature_vector(person, norm) if person is not None else None
        if feat is None or feat.validity < min_validity:
            print(f"{frame_id}\tinvalid")
            continue
        if len(feat) != spec.input_dim:
            raise CliError(f"features have {len(feat)} values, checkpoint expects {spec.input_dim}")
        out, _ = forward(params, spec, feat.values[None, :])
        if task == "classify":
            print(f"{frame_id}\t{EMOTION_NAMES[int(predict_class(out)[0])]}")
        else:
            v, a = float(out[0, 0]), float(out[0, 1])
            print(f"{frame_id}\t{v:.6f},{a:.6f}\t{va_to_class(v, a, thresholds).label}")
    if ok == 0:
        return EXIT_EMPTY
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="poseaffect", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("ingest", help="build a manifest from keypoint folders and label files")
    p.add_argument("--root", required=True, help="directory with one folder of keypoint JSON per video")
    p.add_argument("--labels", required=True, help="directory of per-video label files")
    p.add_argument("--out", default="manifest.tsv")
    p.add_argument("--stride", type=int, default=10)
    p.add_argument("--val-fraction", type=float, default=0.2)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--pattern", default=DEFAULT_FRAME_PATTERN, help="regex whose first group is the frame index")
    p.set_defaults(func=cmd_ingest)

    p = sub.add_parser("train", help="train a network from a run config")
    p.add_argument("config", nargs="?", help="flat key = value config file")
    p.add_argument("--set", action="append", metavar="KEY=VALUE", help="override a config key")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint on one split of a manifest")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--manifest", required=True)
    p.add_argument("--split", default="val", choices=("train", "val"))
    p.add_argument("--report-out", help="append the JSON report line to this file")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("predict", help="predict per-frame emotions from keypoint files")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("paths", nargs="+", help="keypoint files or directories")
    p.set_defaults(func=cmd_predict)
    return parser


def main(argv=None) -> int:
    level = getattr(logging, os.environ.get("POSEAFFECT_LOG", "WARNING").upper(), logging.WARNING)
    logging.basicConfig(level=level,
                        format="%(levelname)s %(name)s: %(message)s")
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return int(e.code or 0)
    try:
        return args.func(args)
    except CliError as e:
        print(f"error: {e}", file=sys.stderr)
        return e.code


if __name__ == "__main__":
    sys.exit(main())
