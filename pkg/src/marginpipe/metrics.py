"""Evaluation math for patch classifiers and binary masks.

Classification metrics are derived from confusion counts; rates with an
undefined denominator are reported as ``None`` rather than coerced to 0.
AUC is the Mann-Whitney rank statistic (ties count one half), which equals
the trapezoidal area under the exported ROC curve. Mask metrics are Dice
overlap, exact Euclidean Hausdorff distance over all foreground pixels,
and per-pixel binary accuracy.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass

import numpy as np
from scipy import ndimage
from scipy.stats import rankdata

from .errors import ContractError, EmptyMaskError, ShapeError, UndefinedMetricError

__all__ = [
    "ConfusionCounts",
    "classification_metrics",
    "auc",
    "roc_points",
    "roc_csv",
    "dsc",
    "hausdorff",
    "pixel_accuracy",
    "mask_pair_metrics",
    "aggregate_mask_metrics",
]


@dataclass(frozen=True)
class ConfusionCounts:
    """Binary confusion-matrix cell counts."""

    tp: int
    tn: int
    fp: int
    fn: int

    def __post_init__(self) -> None:
        for field in ("tp", "tn", "fp", "fn"):
            v = getattr(self, field)
            if not isinstance(v, (int, np.integer)) or v < 0:
                raise ContractError(f"{field} must be a non-negative integer, got {v!r}")

    @property
    def total(self) -> int:
        return self.tp + self.tn + self.fp + self.fn

    @classmethod
    def from_predictions(cls, y_true, y_pred) -> "ConfusionCounts":
        t = np.asarray(y_true).astype(bool).ravel()
        p = np.asarray(y_pred).astype(bool).ravel()
        if t.shape != p.shape:
            raise ShapeError(f"label/prediction length mismatch: {t.shape} vs {p.shape}")
        return cls(
            tp=int(np.sum(t & p)),
            tn=int(np.sum(~t & ~p)),
            fp=int(np.sum(~t & p)),
            fn=int(np.sum(t & ~p)),
        )


def classification_metrics(cc: ConfusionCounts) -> dict[str, float | None]:
    """Accuracy, precision, recall, and F1 from confusion counts.

    Any rate whose denominator is zero comes back as ``None``. F1 is
    ``None`` whenever precision or recall is, and also when both are 0.
    """
    if cc.total == 0:
        raise ContractError("confusion counts sum to zero")
    accuracy = (cc.tp + cc.tn) / cc.total
    precision = cc.tp / (cc.tp + cc.fp) if cc.tp + cc.fp > 0 else None
    recall = cc.tp / (cc.tp + cc.fn) if cc.tp + cc.fn > 0 else None
    if precision is None or recall is None or precision + recall == 0:
        f1 = None
    else:
        f1 = 2 * precision * recall / (precision + recall)
    return {"accuracy": accuracy, "precision": precision, "recall": recall, "f1": f1}


def _score_label_arrays(scores, labels) -> tuple[np.ndarray, np.ndarray]:
    s = np.asarray(scores, dtype=np.float64).ravel()
    y = np.asarray(labels).ravel()
    if s.shape != y.shape:
        raise ShapeError(f"scores/labels length mismatch: {s.shape} vs {y.shape}")
    if s.size == 0:
        raise UndefinedMetricError("no samples")
    if not np.isin(y, (0, 1)).all():
        raise ContractError("labels must be 0 or 1")
    y = y.astype(bool)
    if y.all() or not y.any():
        raise UndefinedMetricError("AUC needs both classes present")
    return s, y


def auc(scores, labels) -> float:
    """Probability a random positive outscores a random negative, ties half.

    Computed from average ranks, so tied groups contribute exactly 1/2 per
    pair and the result matches exhaustive pair counting bit for bit.
    """
    s, y = _score_label_arrays(scores, labels)
    n_pos = int(y.sum())
    n_neg = y.size - n_pos
    ranks = rankdata(s, method="average")
    rank_sum = float(ranks[y].sum())
    return (rank_sum - n_pos * (n_pos + 1) / 2) / (n_pos * n_neg)


def roc_points(scores, labels) -> list[tuple[float, float, float]]:
    """(fpr, tpr, threshold) rows, threshold descending from +inf.

    The first row is (0, 0, inf); the final row predicts everything
    positive and is therefore always (1, 1, min score).
    """
    s, y = _score_label_arrays(scores, labels)
    n_pos = int(y.sum())
    n_neg = y.size - n_pos
    order = np.argsort(-s, kind="stable")
    s_sorted = s[order]
    y_sorted = y[order]
    rows = [(0.0, 0.0, math.inf)]
    tp = fp = 0
    for i in range(s.size):
        if y_sorted[i]:
            tp += 1
        else:
            fp += 1
        # emit one row per distinct threshold, after absorbing its ties
        if i + 1 == s.size or s_sorted[i + 1] != s_sorted[i]:
            rows.append((fp / n_neg, tp / n_pos, float(s_sorted[i])))
    return rows


def roc_csv(scores, labels, path) -> None:
    """Write the ROC curve as CSV with header ``fpr,tpr,threshold``."""
    rows = roc_points(scores, labels)
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["fpr", "tpr", "threshold"])
        for fpr, tpr, thr in rows:
            writer.writerow([repr(fpr), repr(tpr), "inf" if math.isinf(thr) else repr(thr)])


def _binary_mask(m, name: str) -> np.ndarray:
    arr = np.asarray(m)
    if arr.ndim != 2:
        raise ShapeError(f"{name} must be 2-D, got shape {arr.shape}")
    return arr.astype(bool)


def _check_same_dims(a: np.ndarray, b: np.ndarray) -> None:
    if a.shape != b.shape:
        raise ShapeError(f"mask dims differ: {a.shape} vs {b.shape}")


def dsc(a, b) -> float:
    """Dice overlap 2|A∩B| / (|A|+|B|); two empty masks agree perfectly (1.0)."""
    am = _binary_mask(a, "a")
    bm = _binary_mask(b, "b")
    _check_same_dims(am, bm)
    denom = int(am.sum()) + int(bm.sum())
    if denom == 0:
        return 1.0
    return 2 * int((am & bm).sum()) / denom


def hausdorff(a, b) -> float:
    """Exact symmetric Hausdorff distance between foreground pixel sets.

    Uses exact Euclidean distance transforms, one per direction. Raises
    when either mask is empty: there is no meaningful distance to nothing.
    """
    am = _binary_mask(a, "a")
    bm = _binary_mask(b, "b")
    _check_same_dims(am, bm)
    if not am.any() or not bm.any():
        raise EmptyMaskError("hausdorff distance is undefined for an empty mask")
    # distance from every pixel to the nearest foreground pixel of the other mask
    dist_to_b = ndimage.distance_transform_edt(~bm)
    dist_to_a = ndimage.distance_transform_edt(~am)
    return float(max(dist_to_b[am].max(), dist_to_a[bm].max()))


def pixel_accuracy(a, b) -> float:
    """Fraction of pixels where the two binary masks agree."""
    am = _binary_mask(a, "a")
    bm = _binary_mask(b, "b")
    _check_same_dims(am, bm)
    return float(np.mean(am == bm))


def mask_pair_metrics(pred, truth) -> dict[str, float | None]:
    """Per-image mask scores; ``hd`` is None when either mask is empty."""
    try:
        hd: float | None = hausdorff(pred, truth)
    except EmptyMaskError:
        hd = None
    return {
        "dsc": dsc(pred, truth),
        "hd": hd,
        "pixel_accuracy": pixel_accuracy(pred, truth),
    }


def aggregate_mask_metrics(pred_masks, true_masks, ids=None) -> dict:
    """Per-image mask metrics plus mean/std over the defined values.

    Means and stds skip ``None`` entries (images where HD is undefined);
    the counts section records how many images contributed to each.
    """
    preds = list(pred_masks)
    truths = list(true_masks)
    if len(preds) != len(truths):
        raise ShapeError(f"{len(preds)} predictions vs {len(truths)} ground-truth masks")
    if not preds:
        raise ContractError("no mask pairs to evaluate")
    if ids is None:
        ids = list(range(len(preds)))
    per_image = []
    for img_id, p, t in zip(ids, preds, truths):
        row = {"id": img_id}
        row.update(mask_pair_metrics(p, t))
        per_image.append(row)
    report: dict = {"per_image": per_image, "mean": {}, "std": {}, "counts": {}}
    for key in ("dsc", "hd", "pixel_accuracy"):
        values = [row[key] for row in per_image if row[key] is not None]
        report["counts"][key] = len(values)
        if values:
            report["mean"][key] = float(np.mean(values))
            report["std"][key] = float(np.std(values))
        else:
            report["mean"][key] = None
            report["std"][key] = None
    report["counts"]["images"] = len(per_image)
    return report
