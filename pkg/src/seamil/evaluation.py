"""Binary classification metrics and ROC/AUC."""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass
from typing import Sequence

import numpy as np

from .autodiff import ContractError

__all__ = [
    "MetricReport",
    "confusion_metrics",
    "roc_curve",
    "roc_auc",
    "metric_report",
    "UNDEFINED",
]

UNDEFINED = "undefined"


def _ratio(num: int, den: int) -> float | None:
    return num / den if den else None


@dataclass
class MetricReport:
    TP: int
    FP: int
    TN: int
    FN: int
    SN: float | None
    SPC: float | None
    PPV: float | None
    NPV: float | None
    F1S: float | None
    ACC: float
    AUC: float | None = None

    def undefined(self) -> list[str]:
        return [k for k in ("SN", "SPC", "PPV", "NPV", "F1S", "AUC") if getattr(self, k) is None]

    def to_dict(self) -> dict:
        """Plain dict with ``"undefined"`` in place of missing values."""
        return {k: (UNDEFINED if v is None else v) for k, v in asdict(self).items()}

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2)


def confusion_metrics(scores: Sequence[float], labels: Sequence[int], threshold: float = 0.5) -> MetricReport:
    """Threshold ``scores`` (positive when ``>= threshold``) and tabulate.

    Ratios with a zero denominator are ``None`` rather than 0.
    """
    s = np.asarray(scores, dtype=np.float64)
    y = np.asarray(labels)
    if s.size == 0:
        raise ContractError("no predictions")
    if s.shape != y.shape:
        raise ContractError(f"scores {s.shape} and labels {y.shape} differ")
    if not np.isin(y, (0, 1)).all():
        raise ContractError("labels must be 0/1")
    pred = s >= threshold
    pos = y == 1
    tp = int(np.sum(pred & pos))
    fp = int(np.sum(pred & ~pos))
    tn = int(np.sum(~pred & ~pos))
    fn = int(np.sum(~pred & pos))
    sn, ppv = _ratio(tp, tp + fn), _ratio(tp, tp + fp)
    f1 = None
    if sn is not None and ppv is not None and (sn + ppv) > 0:
        f1 = 2 * ppv * sn / (ppv + sn)
    return MetricReport(
        TP=tp, FP=fp, TN=tn, FN=fn,
        SN=sn, SPC=_ratio(tn, tn + fp), PPV=ppv, NPV=_ratio(tn, tn + fn), F1S=f1,
        ACC=(tp + tn) / (tp + tn + fp + fn),
    )


def roc_curve(scores: Sequence[float], labels: Sequence[int]) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """(fpr, tpr, thresholds), one point per distinct score, from (0, 0) to (1, 1)."""
    s = np.asarray(scores, dtype=np.float64)
    y = np.asarray(labels).astype(int)
    n_pos, n_neg = int(y.sum()), int((1 - y).sum())
    if n_pos == 0 or n_neg == 0:
        raise ContractError("ROC needs both classes")
    order = np.argsort(-s, kind="mergesort")
    s, y = s[order], y[order]
    # last index of each run of equal scores
    cut = np.r_[np.nonzero(np.diff(s))[0], len(s) - 1]
    tps = np.cumsum(y)[cut]
    fps = (cut + 1) - tps
    tpr = np.r_[0.0, tps / n_pos]
    fpr = np.r_[0.0, fps / n_neg]
    return fpr, tpr, np.r_[np.inf, s[cut]]


def roc_auc(scores: Sequence[float], labels: Sequence[int]) -> float:
    """Trapezoidal area under the ROC curve (ties give half credit)."""
    fpr, tpr, _ = roc_curve(scores, labels)
    return float(np.sum(np.diff(fpr) * (tpr[1:] + tpr[:-1]) / 2.0))


def metric_report(scores: Sequence[float], labels: Sequence[int], threshold: float = 0.5) -> MetricReport:
    """Confusion metrics plus AUC (``None`` when only one class is present)."""
    rep = confusion_metrics(scores, labels, threshold)
    try:
        rep.AUC = roc_auc(scores, labels)
    except ContractError:
        rep.AUC = None
    return rep
