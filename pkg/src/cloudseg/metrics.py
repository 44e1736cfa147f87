"""Pixelwise accuracy metrics for mask pairs.

Each class (cloud, shadow) is scored one-vs-rest from TP/TN/FP/FN counts:
overall accuracy, recall, precision, intersection-over-union, the two-class
mean IoU, and the F1 score. Metrics with an empty denominator are reported
as None (undefined), never silently coerced to 0 or 1, since fully clear
scenes make degenerate counts common.

Note on IoU naming: the headline ``iou`` is the positive-class
intersection/union ratio; ``miou`` additionally averages in the background
class's IoU. Reports carry both.
"""

from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np

from .errors import ShapeError

CLASS_LABELS = {"cloud": 255, "shadow": 128}


@dataclass
class ConfusionCounts:
    tp: int
    tn: int
    fp: int
    fn: int

    @property
    def total(self) -> int:
        return self.tp + self.tn + self.fp + self.fn

    @property
    def background(self) -> "ConfusionCounts":
        """Counts with the positive/negative roles swapped."""
        return ConfusionCounts(tp=self.tn, tn=self.tp, fp=self.fn, fn=self.fp)


def _labels_of(mask) -> np.ndarray:
    return mask.labels if hasattr(mask, "labels") else np.asarray(mask)


def confusion(pred, ref, positive: str, valid=None) -> ConfusionCounts:
    """Count one-vs-rest agreement for the given positive class.

    pred/ref are MaskRaster objects or label planes; valid is an optional
    boolean plane selecting the pixels to score.
    """
    p = _labels_of(pred)
    r = _labels_of(ref)
    if p.shape != r.shape:
        raise ShapeError(f"mask shapes differ: {p.shape} vs {r.shape}")
    if positive not in CLASS_LABELS:
        raise ShapeError(f"positive class must be one of {sorted(CLASS_LABELS)}")
    label = CLASS_LABELS[positive]
    pb = p == label
    rb = r == label
    if valid is not None:
        valid = np.asarray(valid, dtype=bool)
        if valid.shape != p.shape:
            raise ShapeError(f"valid plane shape {valid.shape} != mask {p.shape}")
        pb = pb[valid]
        rb = rb[valid]
    tp = int(np.count_nonzero(pb & rb))
    tn = int(np.count_nonzero(~pb & ~rb))
    fp = int(np.count_nonzero(pb & ~rb))
    fn = int(np.count_nonzero(~pb & rb))
    return ConfusionCounts(tp=tp, tn=tn, fp=fp, fn=fn)


def overall_accuracy(c: ConfusionCounts):
    if c.total == 0:
        return None
    return (c.tp + c.tn) / c.total


def recall(c: ConfusionCounts):
    if c.tp + c.fn == 0:
        return None
    return c.tp / (c.tp + c.fn)


def precision(c: ConfusionCounts):
    if c.tp + c.fp == 0:
        return None
    return c.tp / (c.tp + c.fp)


def iou(c: ConfusionCounts):
    union = c.tp + c.fp + c.fn
    if union == 0:
        return None
    return c.tp / union


def mean_iou(c: ConfusionCounts, background: ConfusionCounts = None):
    """Average of the positive-class IoU and the background-class IoU."""
    if background is None:
        background = c.background
    a = iou(c)
    b = iou(background)
    if a is None or b is None:
        return None
    return 0.5 * (a + b)


def f_score(recall_value, precision_value):
    """Harmonic mean of recall and precision; None if undefined."""
    if recall_value is None or precision_value is None:
        return None
    s = recall_value + precision_value
    if s == 0:
        return None
    return 2.0 * recall_value * precision_value / s


def report_from_counts(c: ConfusionCounts) -> dict:
    r = recall(c)
    p = precision(c)
    return {
        "oa": overall_accuracy(c),
        "recall": r,
        "precision": p,
        "iou": iou(c),
        "miou": mean_iou(c),
        "f1": f_score(r, p),
    }


def metric_report(pred, ref, classes=("cloud", "shadow"), valid=None) -> dict:
    """Full metric suite, one entry per requested class."""
    return {
        cls: report_from_counts(confusion(pred, ref, cls, valid))
        for cls in classes
    }


def stratified_accuracy(pred, ref, strata, classes=("cloud", "shadow"),
                        valid=None) -> dict:
    """Metric suite restricted to each stratum of a co-registered id plane.

    Strata with no valid pixels are omitted from the result.
    """
    p = _labels_of(pred)
    s = np.asarray(_labels_of(strata))
    if s.shape != p.shape:
        raise ShapeError(f"strata shape {s.shape} != mask {p.shape}")
    base_valid = np.ones(p.shape, dtype=bool) if valid is None else np.asarray(valid, bool)
    out = {}
    for sid in np.unique(s):
        sel = (s == sid) & base_valid
        if not sel.any():
            continue
        out[int(sid)] = metric_report(pred, ref, classes, valid=sel)
    return out


# ---------------------------------------------------------------------------
# report rendering
# ---------------------------------------------------------------------------

def _fmt(v) -> str:
    if v is None:
        return "undefined"
    return f"{v:.4g}"


def report_text(report: dict, strata: dict = None) -> str:
    lines = []
    for cls, vals in report.items():
        row = "  ".join(f"{k}={_fmt(v)}" for k, v in vals.items())
        lines.append(f"{cls}: {row}")
    if strata:
        for sid, by_class in sorted(strata.items()):
            for cls, vals in by_class.items():
                row = "  ".join(f"{k}={_fmt(v)}" for k, v in vals.items())
                lines.append(f"stratum {sid} {cls}: {row}")
    return "\n".join(lines)


def report_json(report: dict, strata: dict = None) -> str:
    doc = {"class": report}
    if strata is not None:
        doc["strata"] = {str(k): v for k, v in strata.items()}
    return json.dumps(doc, indent=2, sort_keys=True)
