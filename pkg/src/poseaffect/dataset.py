"""Sample manifests: building them from keypoint folders, subsampling,
splitting by video, and streaming feature batches for training.

Expected on-disk layout::

    root/<video_id>/<anything>_<frame>_keypoints.json
    labels/<video_id>.txt            # or <video_id>.<tag>.txt, one per scheme

A label file starts with a header line ``EXPR`` or ``VA``. Row ``i`` (after the
header) labels frame ``i``: one integer in ``0..6`` for EXPR, or
``valence,arousal`` for VA. ``-1`` (EXPR) and ``-5`` (VA) mark frames without a
usable annotation.
"""
from __future__ import annotations

import logging
import math
from collections import Counter
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Callable, Iterator

import numpy as np

from .emotion_space import NUM_CLASSES
from .keypoint_io import DEFAULT_FRAME_PATTERN, FeatureVector, KeypointError, frame_index_from_name, parse_frame

log = logging.getLogger(__name__)

EXPR_SENTINEL = -1
VA_SENTINEL = -5.0
MISSING = "·"
MANIFEST_COLUMNS = ("video_id", "frame_index", "frame_path", "expr", "valence", "arousal", "split")
SPLITS = ("train", "val")


class LabelFileError(ValueError):
    pass


class ManifestError(ValueError):
    pass


@dataclass(frozen=True)
class SampleRecord:
    frame_path: str
    video_id: str
    frame_index: int
    expr_label: int | None = None
    va_label: tuple[float, float] | None = None
    split: str = "train"

    def __post_init__(self):
        if self.frame_index < 0:
            raise ValueError("frame_index must be >= 0")
        if self.expr_label is not None and not 0 <= self.expr_label < NUM_CLASSES:
            raise ValueError(f"expr label {self.expr_label} outside 0..6")
        if self.va_label is not None and not all(-1.0 <= c <= 1.0 for c in self.va_label):
            raise ValueError(f"va label {self.va_label} outside [-1, 1]")
        if self.split not in SPLITS:
            raise ValueError(f"split must be one of {SPLITS}")

    @property
    def key(self) -> tuple[str, int]:
        return self.video_id, self.frame_index


@dataclass
class Manifest:
    records: list[SampleRecord] = field(default_factory=list)
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        self.records = sorted(self.records, key=lambda r: r.key)
        keys = [r.key for r in self.records]
        if len(set(keys)) != len(keys):
            dup = next(k for k, c in Counter(keys).items() if c > 1)
            raise ManifestError(f"duplicate record for video {dup[0]!r} frame {dup[1]}")

    def __len__(self) -> int:
        return len(self.records)

    def __iter__(self):
        return iter(self.records)

    def video_ids(self) -> list[str]:
        return sorted({r.video_id for r in self.records})

    def by_split(self, split: str) -> Manifest:
        return Manifest([r for r in self.records if r.split == split], dict(self.meta))


@dataclass
class SkipReport:
    counts: Counter = field(default_factory=Counter)
    items: list = field(default_factory=list)

    def add(self, reason: str, what: str):
        self.counts[reason] += 1
        self.items.append((reason, what))

    @property
    def total(self) -> int:
        return sum(self.counts.values())


@dataclass
class LabelFile:
    header: str
    rows: list


def _parse_label_row(header: str, text: str, lineno: int, path) -> object:
    try:
        if header == "EXPR":
            value = int(text)
            if value != EXPR_SENTINEL and not 0 <= value < NUM_CLASSES:
                raise LabelFileError(f"{path}:{lineno}: expression label {value} outside 0..6")
            return None if value == EXPR_SENTINEL else value
        parts = text.split(",")
        if len(parts) != 2:
            raise LabelFileError(f"{path}:{lineno}: expected 'valence,arousal'")
        v, a = float(parts[0]), float(parts[1])
    except ValueError as e:
        if isinstance(e, LabelFileError):
            raise
        raise LabelFileError(f"{path}:{lineno}: cannot parse {text!r}") from None
    if v == VA_SENTINEL or a == VA_SENTINEL:
        return None
    if not (-1.0 <= v <= 1.0 and -1.0 <= a <= 1.0):
        raise LabelFileError(f"{path}:{lineno}: valence/arousal ({v}, {a}) outside [-1, 1]")
    return (v, a)


def read_label_file(path: str | Path) -> LabelFile:
    """Rows are returned with sentinels replaced by None."""
    lines = Path(path).read_text(encoding="utf-8").splitlines()
    if not lines:
        raise LabelFileError(f"{path}: empty label file")
    header = lines[0].strip().upper()
    if header not in ("EXPR", "VA"):
        raise LabelFileError(f"{path}: header must be EXPR or VA, got {lines[0]!r}")
    rows = []
    for lineno, line in enumerate(lines[1:], start=2):
        line = line.strip()
        if line:
            rows.append(_parse_label_row(header, line, lineno, path))
    return LabelFile(header, rows)


def _label_files_for(labels_dir: Path, video_id: str) -> list[Path]:
    found = []
    for p in sorted(labels_dir.iterdir()):
        if not p.is_file() or p.suffix != ".txt":
            continue
        if p.stem == video_id or p.stem.startswith(video_id + "."):
            found.append(p)
    return found


def build_manifest(root_dir: str | Path, labels_dir: str | Path,
                   pattern: str = DEFAULT_FRAME_PATTERN,
                   check_frames: bool = True) -> tuple[Manifest, SkipReport]:
    """Index every labeled frame under ``root_dir``.

    Frames whose label rows are sentinels (or missing), and frames that cannot
    be read or parsed, end up in the returned :class:`SkipReport` rather than
    raising. A video folder without any label file is an error.
    """
    root_dir, labels_dir = Path(root_dir), Path(labels_dir)
    skips = SkipReport()
    records = []
    schemes = set()
    for video_dir in sorted(p for p in root_dir.iterdir() if p.is_dir()):
        video_id = video_dir.name
        label_paths = _label_files_for(labels_dir, video_id) if labels_dir.is_dir() else []
        if not label_paths:
            raise LabelFileError(f"no label file for video {video_id!r} in {labels_dir}")
        labels = {}
        for lp in label_paths:
            lf = read_label_file(lp)
            if lf.header in labels:
                raise LabelFileError(f"video {video_id!r} has two {lf.header} label files")
            labels[lf.header] = lf.rows
            schemes.add(lf.header)

        for frame_path in sorted(video_dir.glob("*.json")):
            index = frame_index_from_name(frame_path.name, pattern)
            if index is None:
                skips.add("unnamed", str(frame_path))
                continue
            expr = va = None
            if "EXPR" in labels and index < len(labels["EXPR"]):
                expr = labels["EXPR"][index]
            if "VA" in labels and index < len(labels["VA"]):
                va = labels["VA"][index]
            if expr is None and va is None:
                skips.add("sentinel", str(frame_path))
                continue
            if check_frames:
                try:
                    parse_frame(frame_path.read_bytes(), strict=False)
                except (OSError, KeypointError) as e:
                    log.warning("skipping %s: %s", frame_path, e)
                    skips.add("unreadable", str(frame_path))
                    continue
            records.append(SampleRecord(str(frame_path), video_id, index, expr, va))
    meta = {"stride": 1, "schemes": ",".join(sorted(schemes))}
    return Manifest(records, meta), skips


def subsample(m: Manifest, stride: int = 10) -> Manifest:
    """Keep every ``stride``-th record of each video, counted by position."""
    if isinstance(stride, bool) or not isinstance(stride, int) or stride < 1:
        raise ValueError(f"stride must be an integer >= 1, got {stride!r}")
    kept = []
    position = 0
    current = None
    for r in m.records:
        if r.video_id != current:
            current, position = r.video_id, 0
        if position % stride == 0:
            kept.append(r)
        position += 1
    meta = dict(m.meta)
    meta["stride"] = int(meta.get("stride", 1)) * stride
    return Manifest(kept, meta)


def split_train_val(m: Manifest, val_fraction: float = 0.2, seed: int = 0) -> Manifest:
    """Assign whole videos to ``val`` by a seeded shuffle of the video ids."""
    if not 0 < val_fraction < 1:
        raise ValueError("val_fraction must lie strictly between 0 and 1")
    videos = m.video_ids()
    if len(videos) < 2:
        raise ManifestError(f"need at least 2 videos to split, got {len(videos)}")
    n_val = min(max(int(round(val_fraction * len(videos))), 1), len(videos) - 1)
    order = np.random.default_rng(seed).permutation(len(videos))
    val_videos = {videos[i] for i in order[:n_val]}
    records = [replace(r, split="val" if r.video_id in val_videos else "train") for r in m.records]
    meta = dict(m.meta)
    meta.update(seed=seed, val_fraction=val_fraction)
    return Manifest(records, meta)


def class_histogram(m: Manifest) -> list[int]:
    counts = [0] * NUM_CLASSES
    for r in m.records:
        if r.expr_label is not None:
            counts[r.expr_label] += 1
    return counts


def _fmt(v) -> str:
    return MISSING if v is None else repr(v) if isinstance(v, float) else str(v)


def save_manifest(m: Manifest, path: str | Path):
    lines = [f"# {k}={m.meta[k]}" for k in sorted(m.meta)]
    lines.append("\t".join(MANIFEST_COLUMNS))
    for r in m.records:
        v, a = r.va_label if r.va_label is not None else (None, None)
        cells = [r.video_id, str(r.frame_index), r.frame_path, _fmt(r.expr_label), _fmt(v), _fmt(a), r.split]
        if any("\t" in c or "\n" in c for c in cells):
            raise ManifestError(f"tab or newline in record {r.key}")
        lines.append("\t".join(cells))
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def _parse_meta_value(text: str):
    for conv in (int, float):
        try:
            return conv(text)
        except ValueError:
            pass
    return text


def load_manifest(path: str | Path) -> Manifest:
    meta = {}
    records = []
    header_seen = False
    for lineno, line in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), start=1):
        if not line:
            continue
        if not header_seen:
            if line.startswith("# "):
                key, _, value = line[2:].partition("=")
                meta[key] = _parse_meta_value(value)
                continue
            if tuple(line.split("\t")) != MANIFEST_COLUMNS:
                raise ManifestError(f"{path}:{lineno}: unexpected header {line!r}")
            header_seen = True
            continue
        cells = line.split("\t")
        if len(cells) != len(MANIFEST_COLUMNS):
            raise ManifestError(f"{path}:{lineno}: expected {len(MANIFEST_COLUMNS)} columns")
        video_id, frame_index, frame_path, expr, v, a, split = cells
        try:
            va = None if v == MISSING else (float(v), float(a))
            records.append(SampleRecord(frame_path, video_id, int(frame_index),
                                        None if expr == MISSING else int(expr), va, split))
        except ValueError as e:
            raise ManifestError(f"{path}:{lineno}: {e}") from None
    if not header_seen:
        raise ManifestError(f"{path}: missing header line")
    return Manifest(records, meta)


@dataclass
class Batch:
    x: np.ndarray
    expr: np.ndarray
    va: np.ndarray
    records: list


class BatchStream:
    """One epoch of mini-batches over a manifest.

    Samples whose loader raises, or whose validity is below ``min_validity``,
    are dropped and counted in ``skipped``. With ``shuffle_seed`` the order is
    a permutation seeded by ``(shuffle_seed, epoch)``; ``workers > 1`` loads in
    a thread pool without changing that order.
    """

    def __init__(self, m: Manifest, batch_size: int, loader: Callable[[str], FeatureVector],
                 shuffle_seed: int | None = None, epoch: int = 0, min_validity: float = 0.5,
                 workers: int = 1):
        if batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        self.manifest = m
        self.batch_size = batch_size
        self.loader = loader
        self.shuffle_seed = shuffle_seed
        self.epoch = epoch
        self.min_validity = min_validity
        self.workers = workers
        self.yielded = 0
        self.skipped = 0

    def order(self) -> list[int]:
        n = len(self.manifest)
        if self.shuffle_seed is None:
            return list(range(n))
        rng = np.random.default_rng([self.shuffle_seed, self.epoch])
        return rng.permutation(n).tolist()

    def _load(self, record: SampleRecord):
        try:
            return self.loader(record.frame_path)
        except Exception as e:  # loader failures are counted, never fatal
            log.debug("loader failed on %s: %s", record.frame_path, e)
            return None

    def _emit(self, items) -> Batch:
        recs = [r for r, _ in items]
        x = np.stack([f.values for _, f in items])
        expr = np.array([-1 if r.expr_label is None else r.expr_label for r in recs], dtype=np.int64)
        va = np.array([(math.nan, math.nan) if r.va_label is None else r.va_label for r in recs],
                      dtype=np.float64).reshape(len(recs), 2)
        return Batch(x, expr, va, recs)

    def __iter__(self) -> Iterator[Batch]:
        self.yielded = self.skipped = 0
        records = [self.manifest.records[i] for i in self.order()]
        if self.workers > 1:
            pool = ThreadPoolExecutor(self.workers)
            features = pool.map(self._load, records)
        else:
            pool = None
            features = map(self._load, records)
        pending = []
        try:
            for rec, feat in zip(records, features):
                if feat is None or feat.validity < self.min_validity:
                    self.skipped += 1
                    continue
                pending.append((rec, feat))
                if len(pending) == self.batch_size:
                    self.yielded += len(pending)
                    yield self._emit(pending)
                    pending = []
            if pending:
                self.yielded += len(pending)
                yield self._emit(pending)
        finally:
            if pool is not None:
                pool.shutdown(wait=True, cancel_futures=True)


def batch_iter(m: Manifest, batch_size: int, loader: Callable[[str], FeatureVector],
               shuffle_seed: int | None = None, min_validity: float = 0.5, epoch: int = 0,
               workers: int = 1) -> BatchStream:
    return BatchStream(m, batch_size, loader, shuffle_seed=shuffle_seed, epoch=epoch,
                       min_validity=min_validity, workers=workers)
