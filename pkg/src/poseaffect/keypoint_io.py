"""Reading OpenPose per-frame JSON output and turning it into feature vectors.

OpenPose writes one ``*_keypoints.json`` file per video frame. Each file holds
a ``people`` array; every person carries flat ``x, y, c`` triples for the
BODY_25 skeleton (``pose_keypoints_2d``) and the 70-point face model
(``face_keypoints_2d``). Hands and every other key are ignored here.
"""
from __future__ import annotations

import json
import math
import re
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

N_POSE = 25
N_FACE = 70
N_KEYPOINTS = N_POSE + N_FACE
FEATURE_DIM = 3 * N_KEYPOINTS

POSE_KEY = "pose_keypoints_2d"
FACE_KEY = "face_keypoints_2d"

NECK = 1
DEFAULT_FRAME_PATTERN = r"(\d+)_keypoints\.json$"


class KeypointError(ValueError):
    """Base class for every error raised while reading keypoint files."""


class KeypointParseError(KeypointError):
    """The file content is not valid JSON (or not valid UTF-8)."""

    def __init__(self, message: str, offset: int):
        super().__init__(f"{message} (at byte {offset})")
        self.offset = offset


class KeypointSchemaError(KeypointError):
    """The JSON is well formed but does not have the OpenPose layout."""


@dataclass(frozen=True)
class FrameRef:
    video_id: str
    frame_index: int

    def __post_init__(self):
        if self.frame_index < 0:
            raise ValueError(f"frame index must be >= 0, got {self.frame_index}")

    def __str__(self) -> str:
        return f"{self.video_id}/{self.frame_index}"


@dataclass(frozen=True, eq=False)
class PersonKeypoints:
    """Keypoints of one detected person as ``(n, 3)`` arrays of ``x, y, c``."""

    pose: np.ndarray
    face: np.ndarray

    @property
    def layout(self) -> tuple[int, int]:
        return len(self.pose), len(self.face)

    def all_keypoints(self) -> np.ndarray:
        return np.concatenate([self.pose, self.face], axis=0)

    def confidence_sum(self) -> float:
        return float(self.pose[:, 2].sum() + self.face[:, 2].sum())


@dataclass(frozen=True)
class FrameKeypoints:
    persons: tuple[PersonKeypoints, ...]
    source: FrameRef | None = None


@dataclass(frozen=True)
class NormalizationConfig:
    """How raw pixel coordinates become network inputs.

    ``anchor`` indexes the pose keypoint moved to the origin (1 is the neck in
    BODY_25). When the anchor is undetected or the bounding-box diagonal of the
    detected keypoints is below ``eps``, coordinates are divided by
    ``image_diagonal`` instead.
    """

    anchor: int = NECK
    image_diagonal: float = math.hypot(1920.0, 1080.0)
    eps: float = 1e-6
    use_confidence: bool = True

    def feature_dim(self, n_keypoints: int = N_KEYPOINTS) -> int:
        return (3 if self.use_confidence else 2) * n_keypoints


@dataclass(frozen=True, eq=False)
class FeatureVector:
    values: np.ndarray
    validity: float = field(default=0.0)

    def __len__(self) -> int:
        return len(self.values)


def _byte_offset(text: str, char_pos: int) -> int:
    return len(text[:char_pos].encode("utf-8"))


def _keypoint_array(person: dict, key: str, expected: int, strict: bool) -> np.ndarray:
    if key not in person:
        if strict:
            raise KeypointSchemaError(f"{key}: missing")
        return np.zeros((0, 3))
    raw = person[key]
    if not isinstance(raw, list):
        raise KeypointSchemaError(f"{key}: expected an array, got {type(raw).__name__}")
    n = len(raw)
    if strict and n != 3 * expected:
        raise KeypointSchemaError(f"{key}: expected {3 * expected}, got {n}")
    if n % 3:
        raise KeypointSchemaError(f"{key}: length {n} is not a multiple of 3")
    for v in raw:
        # bool is an int subclass; JSON true/false is never a coordinate
        if isinstance(v, bool) or not isinstance(v, (int, float)):
            raise KeypointSchemaError(f"{key}: non-numeric value {v!r}")
    try:
        arr = np.array(raw, dtype=np.float64).reshape(-1, 3)
    except OverflowError:
        raise KeypointSchemaError(f"{key}: value out of range") from None
    if not np.all(np.isfinite(arr)):
        raise KeypointSchemaError(f"{key}: non-finite value")
    if np.any(arr[:, 2] < 0):
        raise KeypointSchemaError(f"{key}: negative confidence")
    return arr


def parse_frame(raw: bytes | str, source: FrameRef | None = None, strict: bool = True) -> FrameKeypoints:
    """Parse the content of one OpenPose JSON file.

    With ``strict=False`` the 25/70 keypoint counts are not enforced; any
    multiple of 3 is accepted and a missing key reads as an empty array. The
    resulting layout is available from :attr:`PersonKeypoints.layout`.
    """
    if isinstance(raw, bytes):
        try:
            text = raw.decode("utf-8")
        except UnicodeDecodeError as e:
            raise KeypointParseError(f"invalid UTF-8: {e.reason}", e.start) from None
    else:
        text = raw
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as e:
        raise KeypointParseError(f"malformed JSON: {e.msg}", _byte_offset(text, e.pos)) from None
    except RecursionError:
        raise KeypointParseError("malformed JSON: nesting too deep", 0) from None

    if not isinstance(doc, dict):
        raise KeypointSchemaError(f"top level: expected an object, got {type(doc).__name__}")
    if "people" not in doc:
        raise KeypointSchemaError("people: missing")
    people = doc["people"]
    if not isinstance(people, list):
        raise KeypointSchemaError(f"people: expected an array, got {type(people).__name__}")

    persons = []
    for i, entry in enumerate(people):
        if not isinstance(entry, dict):
            raise KeypointSchemaError(f"people[{i}]: expected an object")
        pose = _keypoint_array(entry, POSE_KEY, N_POSE, strict)
        face = _keypoint_array(entry, FACE_KEY, N_FACE, strict)
        persons.append(PersonKeypoints(pose=pose, face=face))
    return FrameKeypoints(persons=tuple(persons), source=source)


def serialize_frame(frame: FrameKeypoints) -> bytes:
    """Write a frame back out in the OpenPose layout (only the keys we read)."""
    people = [
        {POSE_KEY: p.pose.reshape(-1).tolist(), FACE_KEY: p.face.reshape(-1).tolist()}
        for p in frame.persons
    ]
    return json.dumps({"version": 1.3, "people": people}).encode("utf-8")


def read_frame(path: str | Path, video_id: str | None = None,
               pattern: str = DEFAULT_FRAME_PATTERN, strict: bool = True) -> FrameKeypoints:
    path = Path(path)
    index = frame_index_from_name(path.name, pattern)
    source = None
    if index is not None:
        source = FrameRef(video_id if video_id is not None else path.parent.name, index)
    return parse_frame(path.read_bytes(), source, strict=strict)


def frame_index_from_name(name: str, pattern: str = DEFAULT_FRAME_PATTERN) -> int | None:
    """Frame index encoded in an OpenPose output file name, or None."""
    m = re.search(pattern, name)
    if m is None:
        return None
    return int(m.group(1))


def select_person(frame: FrameKeypoints) -> PersonKeypoints | None:
    """The person with the largest total confidence; earliest wins ties."""
    best = None
    best_score = -math.inf
    for p in frame.persons:
        score = p.confidence_sum()
        if score > best_score:
            best, best_score = p, score
    return best


def validity_ratio(p: PersonKeypoints) -> float:
    kp = p.all_keypoints()
    if len(kp) == 0:
        return 0.0
    return float(np.count_nonzero(kp[:, 2] > 0)) / len(kp)


def to_feature_vector(p: PersonKeypoints, cfg: NormalizationConfig = NormalizationConfig()) -> FeatureVector:
    """Flatten a person into ``[pose triples..., face triples...]``.

    Detected coordinates are moved so the anchor sits at the origin and
    divided by the diagonal of the detected keypoints' bounding box.
    Undetected keypoints (``c == 0``) are written as zeros.
    """
    kp = p.all_keypoints()
    xy = kp[:, :2].copy()
    conf = kp[:, 2]
    detected = conf > 0

    out = np.zeros_like(xy)
    if detected.any():
        anchor_ok = cfg.anchor < len(p.pose) and detected[cfg.anchor]
        pts = xy[detected]
        span = pts.max(axis=0) - pts.min(axis=0)
        diag = math.hypot(span[0], span[1])
        if anchor_ok:
            centered = xy - xy[cfg.anchor]
            scale = diag if diag >= cfg.eps else cfg.image_diagonal
            out[detected] = centered[detected] / scale
        else:
            out[detected] = xy[detected] / cfg.image_diagonal

    if cfg.use_confidence:
        values = np.column_stack([out, conf]).reshape(-1)
    else:
        values = out.reshape(-1)
    return FeatureVector(values=values, validity=validity_ratio(p))


def empty_feature(cfg: NormalizationConfig = NormalizationConfig(), n_keypoints: int = N_KEYPOINTS) -> FeatureVector:
    """Feature for a frame with nobody in it."""
    return FeatureVector(values=np.zeros(cfg.feature_dim(n_keypoints)), validity=0.0)


def load_feature(path: str | Path, cfg: NormalizationConfig = NormalizationConfig(),
                 strict: bool = True) -> FeatureVector:
    """Read a keypoint file and return the feature of its most confident person."""
    frame = parse_frame(Path(path).read_bytes(), strict=strict)
    person = select_person(frame)
    if person is None:
        return empty_feature(cfg)
    return to_feature_vector(person, cfg)
