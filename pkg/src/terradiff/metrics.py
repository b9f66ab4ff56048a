"""Classification metrics over sparse test points.

Conventions: class ids are 1..K; the confusion matrix has true classes on
rows and predictions on columns.  Classes absent from the ground truth are
excluded from averaged scores and rendered as absent in reports.  Reports are
in percent with two decimals.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .dataio import SparseLabelSet

KAPPA_DEGENERATE_EPS = 1e-12


@dataclass(frozen=True)
class ConfusionMatrix:
    counts: np.ndarray

    def __post_init__(self) -> None:
        c = np.asarray(self.counts)
        if c.ndim != 2 or c.shape[0] != c.shape[1]:
            raise ValueError(f"confusion matrix must be square, got {c.shape}")
        if (c < 0).any():
            raise ValueError("confusion counts must be non-negative")
        object.__setattr__(self, "counts", c.astype(np.int64))

    @classmethod
    def from_predictions(cls, y_true, y_pred, num_classes: int) -> "ConfusionMatrix":
        y_true = np.asarray(y_true, dtype=np.int64)
        y_pred = np.asarray(y_pred, dtype=np.int64)
        if y_true.shape != y_pred.shape or y_true.ndim != 1:
            raise ValueError("y_true and y_pred must be 1-d arrays of equal length")
        for name, y in (("y_true", y_true), ("y_pred", y_pred)):
            if len(y) and (y.min() < 1 or y.max() > num_classes):
                raise ValueError(f"{name} ids must lie in [1, {num_classes}]")
        flat = (y_true - 1) * num_classes + (y_pred - 1)
        counts = np.bincount(flat, minlength=num_classes * num_classes)
        return cls(counts.reshape(num_classes, num_classes))

    @property
    def num_classes(self) -> int:
        return self.counts.shape[0]

    @property
    def total(self) -> int:
        return int(self.counts.sum())


@dataclass(frozen=True)
class ClassificationScores:
    """Fractional scores in [0, 1]; per-class entries are NaN for classes
    absent from the ground truth."""

    oa: float
    aa: float
    kappa: float
    recall: np.ndarray
    precision: np.ndarray
    f1: np.ndarray
    iou: np.ndarray
    present: np.ndarray
    mf1: float
    miou: float


def score_confusion(cm: ConfusionMatrix) -> ClassificationScores:
    counts = cm.counts.astype(np.float64)
    total = counts.sum()
    if total == 0:
        raise ValueError("confusion matrix is empty")
    diag = np.diag(counts)
    rowsum = counts.sum(axis=1)
    colsum = counts.sum(axis=0)
    present = rowsum > 0

    recall = np.full(cm.num_classes, np.nan)
    precision = np.full(cm.num_classes, np.nan)
    f1 = np.full(cm.num_classes, np.nan)
    iou = np.full(cm.num_classes, np.nan)
    for k in np.flatnonzero(present):
        recall[k] = diag[k] / rowsum[k]
        precision[k] = diag[k] / colsum[k] if colsum[k] > 0 else 0.0
        denom = recall[k] + precision[k]
        f1[k] = 2.0 * recall[k] * precision[k] / denom if denom > 0 else 0.0
        iou[k] = diag[k] / (rowsum[k] + colsum[k] - diag[k])

    oa = diag.sum() / total
    aa = float(np.mean(recall[present]))
    p_e = float((rowsum * colsum).sum() / (total * total))
    if 1.0 - p_e < KAPPA_DEGENERATE_EPS:
        kappa = 1.0 if abs(oa - 1.0) < KAPPA_DEGENERATE_EPS else 0.0
    else:
        kappa = (oa - p_e) / (1.0 - p_e)
    return ClassificationScores(
        oa=float(oa),
        aa=aa,
        kappa=float(kappa),
        recall=recall,
        precision=precision,
        f1=f1,
        iou=iou,
        present=present,
        mf1=float(np.mean(f1[present])),
        miou=float(np.mean(iou[present])),
    )


def evaluate_dense(class_map: np.ndarray, labels: SparseLabelSet) -> ConfusionMatrix:
    """Confusion between a dense (H, W) prediction map and point labels."""
    class_map = np.asarray(class_map)
    if class_map.ndim != 2:
        raise ValueError("class_map must be (H, W)")
    labels.validate_bounds(*class_map.shape)
    preds = class_map[labels.rows, labels.cols]
    return ConfusionMatrix.from_predictions(labels.classes, preds, labels.num_classes)


def _pct(v: float) -> str:
    return "-" if np.isnan(v) else f"{100.0 * v:.2f}"


_SUMMARY_ROWS = ("OA", "AA", "Kappa", "mF1", "mIoU")


def _summary_values(s: ClassificationScores) -> tuple[float, ...]:
    return (s.oa, s.aa, s.kappa, s.mf1, s.miou)


def format_report(cm: ConfusionMatrix, class_names=None) -> str:
    """Human-readable per-class table plus summary footer, in percent."""
    s = score_confusion(cm)
    names = _resolve_names(cm, class_names)
    width = max(12, max(len(n) for n in names) + 2)
    lines = [
        f"{'class':<{width}}{'recall':>10}{'precision':>11}{'f1':>10}{'iou':>10}"
    ]
    for k, name in enumerate(names):
        if s.present[k]:
            cells = (_pct(s.recall[k]), _pct(s.precision[k]), _pct(s.f1[k]), _pct(s.iou[k]))
        else:
            cells = ("absent",) * 4
        lines.append(f"{name:<{width}}{cells[0]:>10}{cells[1]:>11}{cells[2]:>10}{cells[3]:>10}")
    lines.append("-" * (width + 41))
    for label, value in zip(_SUMMARY_ROWS, _summary_values(s)):
        lines.append(f"{label:<{width}}{_pct(value):>10}")
    return "\n".join(lines)


def report_csv(cm: ConfusionMatrix, class_names=None) -> str:
    """Machine-readable flavor of the report: per-class rows then summary rows."""
    s = score_confusion(cm)
    names = _resolve_names(cm, class_names)
    lines = ["class,recall,precision,f1,iou"]
    for k, name in enumerate(names):
        if s.present[k]:
            lines.append(
                f"{name},{_pct(s.recall[k])},{_pct(s.precision[k])},"
                f"{_pct(s.f1[k])},{_pct(s.iou[k])}"
            )
        else:
            lines.append(f"{name},absent,absent,absent,absent")
    for label, value in zip(_SUMMARY_ROWS, _summary_values(s)):
        lines.append(f"{label},{_pct(value)}")
    return "\n".join(lines) + "\n"


def _resolve_names(cm: ConfusionMatrix, class_names) -> list[str]:
    if class_names is None:
        return [f"class_{k}" for k in range(1, cm.num_classes + 1)]
    names = [str(n) for n in class_names]
    if len(names) != cm.num_classes:
        raise ValueError(f"need {cm.num_classes} class names, got {len(names)}")
    return names
