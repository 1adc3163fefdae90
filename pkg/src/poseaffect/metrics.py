"""Training losses and evaluation metrics."""
from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from .emotion_space import EMOTION_NAMES, NUM_CLASSES


def cross_entropy(logits, targets) -> tuple[float, np.ndarray]:
    """Mean softmax cross-entropy over the batch and its gradient w.r.t. logits."""
    z = np.asarray(logits, dtype=np.float64)
    y = np.asarray(targets)
    if z.ndim != 2 or len(y) != len(z):
        raise ValueError(f"logits {z.shape} and targets {y.shape} do not line up")
    k = z.shape[1]
    if y.size and (y.min() < 0 or y.max() >= k):
        raise ValueError(f"targets must lie in 0..{k - 1}")
    y = y.astype(np.intp)
    n = len(z)
    shifted = z - z.max(axis=1, keepdims=True)
    log_norm = np.log(np.exp(shifted).sum(axis=1))
    log_p = shifted - log_norm[:, None]
    loss = float(-log_p[np.arange(n), y].mean())
    grad = np.exp(log_p)
    grad[np.arange(n), y] -= 1.0
    return loss, grad / n


def mse_loss(pred, target) -> tuple[float, np.ndarray]:
    p = np.asarray(pred, dtype=np.float64)
    t = np.asarray(target, dtype=np.float64)
    if p.shape != t.shape:
        raise ValueError(f"prediction {p.shape} and target {t.shape} shapes differ")
    diff = p - t
    return float(np.mean(diff * diff)), 2.0 * diff / diff.size


def ccc(pred, target) -> float:
    """Concordance correlation coefficient with population statistics.

    When the denominator is below 1e-12 the result is 1.0 for elementwise
    identical inputs and 0.0 otherwise.
    """
    x = np.asarray(pred, dtype=np.float64).ravel()
    y = np.asarray(target, dtype=np.float64).ravel()
    if len(x) != len(y) or len(x) < 2:
        raise ValueError(f"ccc needs two sequences of equal length >= 2, got {len(x)} and {len(y)}")
    mx, my = x.mean(), y.mean()
    dx, dy = x - mx, y - my
    # a constant sequence has zero covariance with anything; don't let rounding in the mean say otherwise
    if np.all(x == x[0]) or np.all(y == y[0]):
        cov = 0.0
    else:
        cov = float(np.mean(dx * dy))
    denom = float(np.mean(dx * dx) + np.mean(dy * dy) + (mx - my) ** 2)
    if denom < 1e-12:
        return 1.0 if np.array_equal(x, y) else 0.0
    return 2.0 * cov / denom


def confusion_matrix(true, pred, num_classes: int = NUM_CLASSES) -> np.ndarray:
    t = np.asarray(true)
    p = np.asarray(pred)
    if t.shape != p.shape or t.ndim != 1:
        raise ValueError("true and pred must be 1-d and of equal length")
    for name, a in (("true", t), ("pred", p)):
        if a.size and (a.min() < 0 or a.max() >= num_classes):
            raise ValueError(f"{name} labels must lie in 0..{num_classes - 1}")
    cm = np.zeros((num_classes, num_classes), dtype=np.int64)
    np.add.at(cm, (t.astype(np.intp), p.astype(np.intp)), 1)
    return cm


def _safe_div(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    out = np.zeros(a.shape, dtype=np.float64)
    np.divide(a, b, out=out, where=b != 0)
    return out


@dataclass
class MetricsReport:
    confusion: np.ndarray | None = None
    precision: np.ndarray | None = None
    recall: np.ndarray | None = None
    f1: np.ndarray | None = None
    macro_f1: float | None = None
    ccc_valence: float | None = None
    ccc_arousal: float | None = None
    extra: dict = field(default_factory=dict)

    def as_dict(self) -> dict:
        d = {}
        if self.confusion is not None:
            d["confusion"] = self.confusion.tolist()
            d["precision"] = [float(v) for v in self.precision]
            d["recall"] = [float(v) for v in self.recall]
            d["f1"] = [float(v) for v in self.f1]
            d["macro_f1"] = float(self.macro_f1)
        if self.ccc_valence is not None:
            d["ccc_valence"] = float(self.ccc_valence)
            d["ccc_arousal"] = float(self.ccc_arousal)
        d.update(self.extra)
        return d

    def to_json_line(self) -> str:
        return json.dumps(self.as_dict(), sort_keys=True)

    def to_text(self) -> str:
        """Flat ``key = value`` block for humans."""
        lines = [f"{k} = {v}" for k, v in sorted(self.extra.items())]
        if self.confusion is not None:
            lines.append(f"macro_f1 = {self.macro_f1:.6f}")
            for i, name in enumerate(EMOTION_NAMES):
                lines.append(f"precision.{name} = {self.precision[i]:.6f}")
                lines.append(f"recall.{name} = {self.recall[i]:.6f}")
                lines.append(f"f1.{name} = {self.f1[i]:.6f}")
            for i, name in enumerate(EMOTION_NAMES):
                row = " ".join(str(int(c)) for c in self.confusion[i])
                lines.append(f"confusion.{name} = {row}")
        if self.ccc_valence is not None:
            lines.append(f"ccc_valence = {self.ccc_valence:.6f}")
            lines.append(f"ccc_arousal = {self.ccc_arousal:.6f}")
        return "\n".join(lines)


def confusion_and_f1(true, pred, num_classes: int = NUM_CLASSES) -> MetricsReport:
    if len(true) < 1:
        raise ValueError("need at least one sample")
    cm = confusion_matrix(true, pred, num_classes)
    diag = np.diag(cm).astype(np.float64)
    precision = _safe_div(diag, cm.sum(axis=0).astype(np.float64))
    recall = _safe_div(diag, cm.sum(axis=1).astype(np.float64))
    f1 = _safe_div(2 * precision * recall, precision + recall)
    return MetricsReport(confusion=cm, precision=precision, recall=recall, f1=f1,
                         macro_f1=float(f1.mean()))


def va_report(pred, target) -> MetricsReport:
    """CCC for valence (column 0) and arousal (column 1)."""
    p = np.asarray(pred, dtype=np.float64)
    t = np.asarray(target, dtype=np.float64)
    return MetricsReport(ccc_valence=ccc(p[:, 0], t[:, 0]), ccc_arousal=ccc(p[:, 1], t[:, 1]))
