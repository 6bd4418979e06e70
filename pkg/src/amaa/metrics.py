"""Evaluation metrics: completion IoU, semantic mIoU, precision, recall.

Predictions come from the channel argmax of the probability volume (ties go
to the lowest class index). Two views of quality:

* scene completion: binary occupied-vs-empty IoU, precision and recall,
  where occupied means any non-empty class;
* semantics: per-class IoU over the non-empty classes averaged into mIoU.

Degenerate denominators score perfect: a class absent from both prediction
and truth has IoU 1.0, and empty precision/recall denominators give 1.0.
Counts accumulate globally over a whole split before any ratio is taken.
"""

from __future__ import annotations

import csv
import io
import json
from dataclasses import dataclass, field

import numpy as np

from .errors import ShapeError


def predict_labels(probs) -> np.ndarray:
    """Channel argmax as int labels; exact ties pick the lowest class."""
    arr = np.asarray(probs)
    if arr.ndim != 4:
        raise ShapeError(f"probabilities must be (C, D, H, W), got {arr.shape}")
    return arr.argmax(axis=0).astype(np.int64)


def mean_iou(per_class_ious) -> float:
    """Plain average of per-class IoUs (the mIoU aggregation rule)."""
    vals = [float(v) for v in per_class_ious]
    if not vals:
        raise ShapeError("mean_iou needs at least one class IoU")
    return sum(vals) / len(vals)


def _safe_ratio(num: int, den: int) -> float:
    return 1.0 if den == 0 else num / den


@dataclass
class MetricsAccumulator:
    """Global TP/FP/FN counts per class plus binary occupancy counts."""

    n_classes: int
    tp: np.ndarray = field(init=False)
    fp: np.ndarray = field(init=False)
    fn: np.ndarray = field(init=False)
    occ_tp: int = 0
    occ_fp: int = 0
    occ_fn: int = 0

    def __post_init__(self):
        if self.n_classes < 2:
            raise ShapeError(f"need >= 2 classes (empty + 1), got {self.n_classes}")
        self.tp = np.zeros(self.n_classes, dtype=np.int64)
        self.fp = np.zeros(self.n_classes, dtype=np.int64)
        self.fn = np.zeros(self.n_classes, dtype=np.int64)

    def update(self, pred, truth):
        pred = np.asarray(pred)
        truth = np.asarray(truth)
        if pred.shape != truth.shape:
            raise ShapeError(f"pred {pred.shape} vs truth {truth.shape}")
        for c in range(self.n_classes):
            p = pred == c
            t = truth == c
            self.tp[c] += int(np.sum(p & t))
            self.fp[c] += int(np.sum(p & ~t))
            self.fn[c] += int(np.sum(~p & t))
        p_occ = pred != 0
        t_occ = truth != 0
        self.occ_tp += int(np.sum(p_occ & t_occ))
        self.occ_fp += int(np.sum(p_occ & ~t_occ))
        self.occ_fn += int(np.sum(~p_occ & t_occ))

    def report(self) -> "MetricsReport":
        class_iou = []
        for c in range(1, self.n_classes):
            union = int(self.tp[c] + self.fp[c] + self.fn[c])
            class_iou.append(_safe_ratio(int(self.tp[c]), union))
        return MetricsReport(
            sc_iou=_safe_ratio(self.occ_tp, self.occ_tp + self.occ_fp + self.occ_fn),
            miou=mean_iou(class_iou),
            precision=_safe_ratio(self.occ_tp, self.occ_tp + self.occ_fp),
            recall=_safe_ratio(self.occ_tp, self.occ_tp + self.occ_fn),
            class_iou=class_iou,
            support=[int(self.tp[c] + self.fn[c]) for c in range(self.n_classes)],
        )


@dataclass
class MetricsReport:
    """Final ratios for one split, serializable to JSON and one CSV row.

    class_iou[i] is the IoU of semantic class i+1 (empty is excluded from
    mIoU but kept in the support counts).
    """

    sc_iou: float
    miou: float
    precision: float
    recall: float
    class_iou: list
    support: list

    def to_dict(self) -> dict:
        return {
            "sc_iou": self.sc_iou,
            "miou": self.miou,
            "precision": self.precision,
            "recall": self.recall,
            "class_iou": list(self.class_iou),
            "support": list(self.support),
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    @classmethod
    def from_dict(cls, data: dict) -> "MetricsReport":
        return cls(sc_iou=data["sc_iou"], miou=data["miou"],
                   precision=data["precision"], recall=data["recall"],
                   class_iou=list(data["class_iou"]),
                   support=list(data["support"]))

    def csv_columns(self) -> list:
        cols = ["sc_iou", "miou", "precision", "recall"]
        cols += [f"iou_class_{k + 1}" for k in range(len(self.class_iou))]
        return cols

    def csv_row(self) -> list:
        return ([repr(self.sc_iou), repr(self.miou), repr(self.precision),
                 repr(self.recall)] + [repr(v) for v in self.class_iou])

    def to_csv(self) -> str:
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(self.csv_columns())
        writer.writerow(self.csv_row())
        return buf.getvalue()


def evaluate_pair(pred, truth, n_classes: int) -> MetricsReport:
    """Report for a single (pred, truth) volume pair."""
    acc = MetricsAccumulator(n_classes)
    acc.update(pred, truth)
    return acc.report()
