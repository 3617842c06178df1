"""Confusion matrices, per-class F1 and overall accuracy."""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .errors import DimensionError, LabelError
from .rasters import UNDEFINED, LabelMap, erode_labels


class ConfusionMatrix:
    """K x K counts; rows are reference classes, columns predictions."""

    def __init__(self, num_classes: int, counts: np.ndarray | None = None):
        self.num_classes = num_classes
        if counts is None:
            counts = np.zeros((num_classes, num_classes), dtype=np.int64)
        self.counts = np.asarray(counts, dtype=np.int64)
        if self.counts.shape != (num_classes, num_classes):
            raise DimensionError("confusion matrix must be K x K")

    @property
    def total(self) -> int:
        return int(self.counts.sum())

    def overall_accuracy(self) -> float | None:
        total = self.total
        if total == 0:
            return None
        return int(np.trace(self.counts)) / total

    def __add__(self, other: "ConfusionMatrix") -> "ConfusionMatrix":
        return ConfusionMatrix(self.num_classes, self.counts + other.counts)

    def __eq__(self, other) -> bool:
        return isinstance(other, ConfusionMatrix) and np.array_equal(self.counts, other.counts)


def _values(labels) -> np.ndarray:
    return labels.values if isinstance(labels, LabelMap) else np.asarray(labels)


def accumulate(cm: ConfusionMatrix, predicted, reference) -> ConfusionMatrix:
    """Add the pixels of one prediction/reference pair; undefined references are skipped."""
    pred, ref = _values(predicted), _values(reference)
    if pred.shape != ref.shape:
        raise DimensionError(f"prediction {pred.shape} and reference {ref.shape} differ")
    k = cm.num_classes
    valid = ref != UNDEFINED
    r = ref[valid].astype(np.int64)
    p = pred[valid].astype(np.int64)
    if r.size and (r.max() >= k or r.min() < 0):
        raise LabelError(f"reference class id outside 0..{k - 1}")
    if p.size and (p.max() >= k or p.min() < 0):
        raise LabelError(f"predicted class id outside 0..{k - 1}")
    cm.counts += np.bincount(r * k + p, minlength=k * k).reshape(k, k)
    return cm


def f1_scores(cm: ConfusionMatrix) -> list[float | None]:
    """Per-class F1; ``None`` for classes absent from both reference and prediction."""
    return [f for _, _, f in _rates(cm)]


def _rates(cm: ConfusionMatrix):
    c = cm.counts
    tp = np.diag(c)
    support = c.sum(axis=1)
    predicted = c.sum(axis=0)
    out = []
    for i in range(cm.num_classes):
        t, ci, pi = int(tp[i]), int(support[i]), int(predicted[i])
        recall = t / ci if ci else None
        precision = t / pi if pi else None
        if ci == 0 and pi == 0:
            f1 = None
        elif t == 0:
            f1 = 0.0
        else:
            f1 = 2 * precision * recall / (precision + recall)
        out.append((precision, recall, f1))
    return out


@dataclass
class EvalReport:
    classes: list
    precision: list
    recall: list
    f1: list
    overall_accuracy: float | None
    confusion: list
    erode_radius: float = 0
    mean_f1: float | None = None
    weighted_f1: float | None = None
    metadata: dict = field(default_factory=dict)

    @property
    def eroded(self) -> bool:
        return self.erode_radius > 0

    def to_dict(self) -> dict:
        d = asdict(self)
        d["eroded"] = self.eroded
        return d

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    @classmethod
    def from_dict(cls, d: dict) -> "EvalReport":
        d = {k: v for k, v in d.items() if k != "eroded"}
        return cls(**d)

    @classmethod
    def from_json(cls, text: str) -> "EvalReport":
        return cls.from_dict(json.loads(text))

    def confusion_matrix(self) -> ConfusionMatrix:
        return ConfusionMatrix(len(self.classes), np.array(self.confusion, dtype=np.int64))

    def to_text(self) -> str:
        width = max(len(c) for c in self.classes) + 2
        lines = [f"{'class':<{width}}{'precision':>10}{'recall':>10}{'F1':>10}"]
        fmt = lambda v: f"{100 * v:10.1f}" if v is not None else f"{'-':>10}"
        for name, p, r, f in zip(self.classes, self.precision, self.recall, self.f1):
            lines.append(f"{name:<{width}}{fmt(p)}{fmt(r)}{fmt(f)}")
        lines.append(f"{'overall accuracy':<{width}}{fmt(self.overall_accuracy)}")
        lines.append(f"{'mean F1 (extra)':<{width}}{fmt(self.mean_f1)}")
        lines.append(f"{'weighted F1 (extra)':<{width}}{fmt(self.weighted_f1)}")
        return "\n".join(lines)


def report_from_cm(cm: ConfusionMatrix, classes: Sequence[str], erode_radius: float = 0,
                   metadata: dict | None = None) -> EvalReport:
    rates = _rates(cm)
    f1 = [f for _, _, f in rates]
    support = cm.counts.sum(axis=1)
    present = [(f, int(s)) for f, s in zip(f1, support) if f is not None]
    mean_f1 = sum(f for f, _ in present) / len(present) if present else None
    weight = sum(s for _, s in present)
    weighted = sum(f * s for f, s in present) / weight if weight else None
    return EvalReport(
        classes=list(classes),
        precision=[p for p, _, _ in rates],
        recall=[r for _, r, _ in rates],
        f1=f1,
        overall_accuracy=cm.overall_accuracy(),
        confusion=cm.counts.tolist(),
        erode_radius=erode_radius,
        mean_f1=mean_f1,
        weighted_f1=weighted,
        metadata=dict(metadata or {}),
    )


def evaluate(predicted, reference, erode_radius: float = 3, classes: Sequence[str] | None = None,
             metadata: dict | None = None) -> EvalReport:
    """Score one or several prediction/reference pairs after eroding class borders."""
    preds = predicted if isinstance(predicted, (list, tuple)) else [predicted]
    refs = reference if isinstance(reference, (list, tuple)) else [reference]
    if len(preds) != len(refs):
        raise DimensionError("need one reference per prediction")
    if classes is None:
        top = max(int(max(_values(p).max(initial=0), _masked_max(_values(r)))) for p, r in zip(preds, refs))
        classes = [str(i) for i in range(top + 1)]
    cm = ConfusionMatrix(len(classes))
    for p, r in zip(preds, refs):
        ref = erode_labels(r, erode_radius) if erode_radius > 0 else r
        accumulate(cm, p, ref)
    return report_from_cm(cm, classes, erode_radius, metadata)


def _masked_max(values: np.ndarray) -> int:
    defined = values[values != UNDEFINED]
    return int(defined.max()) if defined.size else 0


# ------------------------------------------------------------------ heat map


def write_confusion_ppm(cm: ConfusionMatrix, path, cell: int = 24) -> None:
    """Row-normalised confusion matrix as a binary PPM (dark blue -> yellow ramp)."""
    counts = cm.counts.astype(np.float64)
    rows = counts.sum(axis=1, keepdims=True)
    norm = np.divide(counts, rows, out=np.zeros_like(counts), where=rows > 0)
    lo, hi = np.array([20, 20, 90.0]), np.array([250, 230, 40.0])
    rgb = (lo + norm[..., None] * (hi - lo)).round().astype(np.uint8)
    img = np.repeat(np.repeat(rgb, cell, axis=0), cell, axis=1)
    write_ppm(img, path)


def write_ppm(rgb: np.ndarray, path) -> None:
    rgb = np.ascontiguousarray(rgb, dtype=np.uint8)
    h, w, _ = rgb.shape
    Path(path).write_bytes(f"P6\n{w} {h}\n255\n".encode("ascii") + rgb.tobytes())
