"""Segmentation metrics from an exact integer confusion matrix.

Accumulation is commutative and associative, so shards can be reduced in
any order. Classes absent from both prediction and ground truth are
excluded from the means; 0/0 cells within a present class are defined as
0 to keep means finite.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

METRIC_NAMES = ("iou", "fsc", "pre", "rec")


@dataclass
class ConfusionMatrix:
    counts: np.ndarray  # (C, C) int64; [ground truth, prediction]

    def __post_init__(self) -> None:
        self.counts = np.asarray(self.counts, dtype=np.int64)
        if self.counts.ndim != 2 or self.counts.shape[0] != self.counts.shape[1]:
            raise ValueError(f"counts must be square, got shape {self.counts.shape}")
        if (self.counts < 0).any():
            raise ValueError("counts must be nonnegative")

    @property
    def num_classes(self) -> int:
        return self.counts.shape[0]

    @property
    def total(self) -> int:
        return int(self.counts.sum())


def new_confusion(num_classes: int) -> ConfusionMatrix:
    return ConfusionMatrix(np.zeros((num_classes, num_classes), dtype=np.int64))


def accumulate(cm: ConfusionMatrix, pred: np.ndarray, label: np.ndarray,
               ignore_index: int = 255) -> ConfusionMatrix:
    """Add one prediction/label pair; ignored pixels contribute nothing."""
    pred = np.asarray(pred)
    label = np.asarray(label)
    if pred.shape != label.shape:
        raise ValueError(f"shape mismatch: pred {pred.shape} vs label {label.shape}")
    c = cm.num_classes
    valid = label != ignore_index
    pv, lv = pred[valid].astype(np.int64), label[valid].astype(np.int64)
    if pv.size:
        if pv.min() < 0 or pv.max() >= c:
            raise ValueError(f"prediction contains class id outside [0, {c})")
        if lv.min() < 0 or lv.max() >= c:
            raise ValueError(f"label contains class id outside [0, {c})")
        cm.counts += np.bincount(lv * c + pv, minlength=c * c).reshape(c, c)
    return cm


def merge(parts: Sequence[ConfusionMatrix]) -> ConfusionMatrix:
    if not parts:
        raise ValueError("nothing to merge")
    c = parts[0].num_classes
    if any(p.num_classes != c for p in parts):
        raise ValueError("confusion matrices disagree on class count")
    return ConfusionMatrix(sum((p.counts for p in parts),
                               np.zeros((c, c), dtype=np.int64)))


@dataclass
class MetricsReport:
    num_classes: int
    valid: np.ndarray      # (C,) bool; class appears in label or prediction
    iou: np.ndarray        # (C,) float64, 0 where invalid
    fsc: np.ndarray
    pre: np.ndarray
    rec: np.ndarray
    m_iou: float
    m_fsc: float
    m_pre: float
    m_rec: float
    a_acc: float
    total: int


def _safe_div(num: np.ndarray, den: np.ndarray) -> np.ndarray:
    out = np.zeros_like(num, dtype=np.float64)
    np.divide(num, den, out=out, where=den > 0)
    return out


def compute(cm: ConfusionMatrix) -> MetricsReport:
    if cm.total == 0:
        raise ValueError("empty confusion matrix")
    counts = cm.counts.astype(np.float64)
    tp = np.diag(counts)
    fp = counts.sum(axis=0) - tp
    fn = counts.sum(axis=1) - tp
    valid = (tp + fp + fn) > 0
    iou = _safe_div(tp, tp + fp + fn)
    pre = _safe_div(tp, tp + fp)
    rec = _safe_div(tp, tp + fn)
    fsc = _safe_div(2.0 * pre * rec, pre + rec)
    return MetricsReport(
        num_classes=cm.num_classes,
        valid=valid,
        iou=iou, fsc=fsc, pre=pre, rec=rec,
        m_iou=float(iou[valid].mean()),
        m_fsc=float(fsc[valid].mean()),
        m_pre=float(pre[valid].mean()),
        m_rec=float(rec[valid].mean()),
        a_acc=float(tp.sum() / counts.sum()),
        total=cm.total,
    )


def error_range(run_values: Sequence[float]) -> float:
    """Spread (max - min) of a metric across independent runs."""
    if len(run_values) < 2:
        raise ValueError(f"need at least 2 run values, got {len(run_values)}")
    return float(max(run_values) - min(run_values))


def _pct(value: float) -> str:
    return f"{100.0 * value:.2f}"


def report_to_text(report: MetricsReport) -> str:
    lines = [
        f"{'class':>8} {'IoU%':>8} {'Fsc%':>8} {'Pre%':>8} {'Rec%':>8}",
    ]
    for c in range(report.num_classes):
        if report.valid[c]:
            lines.append(
                f"{c:>8} {_pct(report.iou[c]):>8} {_pct(report.fsc[c]):>8} "
                f"{_pct(report.pre[c]):>8} {_pct(report.rec[c]):>8}"
            )
        else:
            lines.append(f"{c:>8} {'-':>8} {'-':>8} {'-':>8} {'-':>8}")
    lines.append("")
    lines.append(
        f"{'mean':>8} mFsc={_pct(report.m_fsc)} mIoU={_pct(report.m_iou)} "
        f"aAcc={_pct(report.a_acc)} mPre={_pct(report.m_pre)} mRec={_pct(report.m_rec)}"
    )
    return "\n".join(lines) + "\n"


def report_to_kv(report: MetricsReport) -> str:
    lines = [
        f"mFsc={_pct(report.m_fsc)}",
        f"mIoU={_pct(report.m_iou)}",
        f"aAcc={_pct(report.a_acc)}",
        f"mPre={_pct(report.m_pre)}",
        f"mRec={_pct(report.m_rec)}",
    ]
    for c in range(report.num_classes):
        if not report.valid[c]:
            continue
        lines.append(f"per_class.{c}.iou={_pct(report.iou[c])}")
        lines.append(f"per_class.{c}.fsc={_pct(report.fsc[c])}")
        lines.append(f"per_class.{c}.pre={_pct(report.pre[c])}")
        lines.append(f"per_class.{c}.rec={_pct(report.rec[c])}")
    return "\n".join(lines) + "\n"
