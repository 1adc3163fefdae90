"""Discrete emotion codes and their relation to valence/arousal space."""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from enum import IntEnum


class Emotion(IntEnum):
    HAPPINESS = 0
    SADNESS = 1
    NEUTRAL = 2
    ANGER = 3
    SURPRISE = 4
    DISGUST = 5
    FEAR = 6

    @property
    def label(self) -> str:
        return self.name.lower()


EMOTION_NAMES = tuple(e.label for e in Emotion)
NUM_CLASSES = len(EMOTION_NAMES)

DEFAULT_PROTOTYPES = {
    Emotion.HAPPINESS: (0.8, 0.5),
    Emotion.SADNESS: (-0.7, -0.4),
    Emotion.NEUTRAL: (0.0, 0.0),
    Emotion.ANGER: (-0.6, 0.7),
    Emotion.SURPRISE: (0.3, 0.8),
    Emotion.DISGUST: (-0.7, 0.3),
    Emotion.FEAR: (-0.6, 0.8),
}


@dataclass(frozen=True)
class VAThresholds:
    """Nearest-prototype layout of the seven classes on the valence/arousal plane."""

    neutral_radius: float = 0.15
    prototypes: dict = field(default_factory=lambda: dict(DEFAULT_PROTOTYPES))

    def __post_init__(self):
        if self.neutral_radius <= 0:
            raise ValueError("neutral_radius must be positive")
        protos = {Emotion(k): (float(v), float(a)) for k, (v, a) in self.prototypes.items()}
        if set(protos) != set(Emotion):
            raise ValueError("a prototype is required for each of the seven classes")
        if protos[Emotion.NEUTRAL] != (0.0, 0.0):
            raise ValueError("the neutral prototype must sit at (0, 0)")
        if len(set(protos.values())) != len(protos):
            raise ValueError("prototypes must be distinct")
        for pt in protos.values():
            if not all(-1.0 <= c <= 1.0 for c in pt):
                raise ValueError(f"prototype {pt} is outside [-1, 1]^2")
        object.__setattr__(self, "prototypes", protos)


def remap_label(raw: int) -> Emotion:
    """Convert a 1..7 annotation code to the internal 0..6 class."""
    if isinstance(raw, bool) or not isinstance(raw, int) or not 1 <= raw <= 7:
        raise ValueError(f"emotion code must be an integer in 1..7, got {raw!r}")
    return Emotion(raw - 1)


def va_to_class(v: float, a: float, t: VAThresholds | None = None) -> Emotion:
    if t is None:
        t = VAThresholds()
    if not (-1.0 <= v <= 1.0 and -1.0 <= a <= 1.0):
        raise ValueError(f"valence/arousal must lie in [-1, 1], got ({v}, {a})")
    if math.hypot(v, a) < t.neutral_radius:
        return Emotion.NEUTRAL
    best, best_d = None, math.inf
    for cls in Emotion:
        pv, pa = t.prototypes[cls]
        d = math.hypot(v - pv, a - pa)
        if d < best_d:
            best, best_d = cls, d
    return best
