"""Segmentation metrics and prototype-distribution statistics."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import ContractError


def confusion_matrix(predictions, labels, n_classes: int) -> np.ndarray:
    """Counts with rows = ground truth, columns = prediction."""
    predictions = np.asarray(predictions, dtype=np.int64)
    labels = np.asarray(labels, dtype=np.int64)
    if predictions.shape != labels.shape:
        raise ContractError(f"{predictions.size} predictions for {labels.size} labels")
    for name, arr in (("prediction", predictions), ("label", labels)):
        if arr.size and (arr.min() < 0 or arr.max() >= n_classes):
            raise ContractError(f"{name} index outside [0, {n_classes})")
    return np.bincount(labels * n_classes + predictions, minlength=n_classes * n_classes).reshape(
        n_classes, n_classes)


def iou_from_confusion(conf: np.ndarray) -> np.ndarray:
    """Per-class IoU; NaN where the class is absent from labels and predictions."""
    tp = np.diag(conf).astype(float)
    union = conf.sum(axis=0) + conf.sum(axis=1) - tp
    with np.errstate(invalid="ignore", divide="ignore"):
        return np.where(union > 0, tp / np.where(union > 0, union, 1), np.nan)


def confusion_and_iou(predictions, labels, n_classes: int):
    conf = confusion_matrix(predictions, labels, n_classes)
    return conf, iou_from_confusion(conf)


def mean_iou(iou: np.ndarray, classes, absent_as_zero: bool = False) -> float:
    vals = np.asarray(iou, dtype=float)[list(classes)]
    if absent_as_zero:
        vals = np.nan_to_num(vals, nan=0.0)
    vals = vals[~np.isnan(vals)]
    return float(vals.mean()) if vals.size else 0.0


def hmiou(miou_seen: float, miou_unseen: float) -> float:
    s, u = float(miou_seen), float(miou_unseen)
    return 0.0 if s + u == 0 else 2.0 * s * u / (s + u)


def entropy_rows(dists) -> np.ndarray:
    w = np.asarray(dists, dtype=float)
    with np.errstate(divide="ignore", invalid="ignore"):
        terms = np.where(w > 0, w * np.log(np.where(w > 0, w, 1.0)), 0.0)
    return -terms.sum(axis=1)


def lgp_entropy(dists) -> float:
    """Mean Shannon entropy (nats) over rows; 0 log 0 = 0."""
    e = entropy_rows(dists)
    return float(e.mean()) if e.size else 0.0


def random_assignment_miou(label_counts, classes) -> float:
    """Expected mIoU over ``classes`` when each point gets a uniform random label.

    For a class holding a fraction p of the points among C classes the
    expected intersection is pN/C and the union N(p + 1/C - p/C).
    """
    counts = np.asarray(label_counts, dtype=float)
    n_cls = len(counts)
    p = counts / counts.sum()
    iou = (p / n_cls) / (p + 1.0 / n_cls - p / n_cls)
    return float(np.mean(iou[list(classes)]))


@dataclass
class EvalReport:
    confusion: np.ndarray
    per_class_iou: np.ndarray
    miou_seen: float
    miou_unseen: float
    miou_all: float
    hmiou: float
    entropy_visual: float = float("nan")
    entropy_semantic: float = float("nan")
    names: list[str] = field(default_factory=list)
    seen: tuple[int, ...] = ()
    unseen: tuple[int, ...] = ()
    extra: dict = field(default_factory=dict)

    def scalars(self) -> dict[str, float]:
        out = {
            "miou_seen": self.miou_seen,
            "miou_unseen": self.miou_unseen,
            "miou_all": self.miou_all,
            "hmiou": self.hmiou,
            "entropy_visual": self.entropy_visual,
            "entropy_semantic": self.entropy_semantic,
            "points": int(self.confusion.sum()),
        }
        out.update(self.extra)
        return out

    def percent(self) -> dict[str, float]:
        return {k: round(100 * getattr(self, k), 1) for k in ("miou_seen", "miou_unseen", "miou_all", "hmiou")}


def build_report(conf: np.ndarray, seen, unseen, names=None, absent_as_zero: bool = False,
                 entropy_visual: float = float("nan"), entropy_semantic: float = float("nan")) -> EvalReport:
    iou = iou_from_confusion(conf)
    s = mean_iou(iou, seen, absent_as_zero)
    u = mean_iou(iou, unseen, absent_as_zero)
    a = mean_iou(iou, list(seen) + list(unseen), absent_as_zero)
    return EvalReport(conf, iou, s, u, a, hmiou(s, u), entropy_visual, entropy_semantic,
                      list(names or []), tuple(seen), tuple(unseen))


def aggregate(reports: list[EvalReport], keys=("miou_seen", "miou_unseen", "miou_all", "hmiou")) -> dict:
    """Mean and population std over runs, per metric."""
    out = {}
    for k in keys:
        vals = np.array([getattr(r, k) for r in reports], dtype=float)
        out[k] = (float(vals.mean()), float(vals.std()))
    return out
