"""Multi-label evaluation: rank-based ROC-AUC, threshold accuracy and F1."""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass
from typing import Optional

import numpy as np
from scipy.stats import rankdata

from ..engine.ops import stable_sigmoid


def roc_auc(scores, labels) -> Optional[float]:
    """Mann-Whitney AUC with average ranks for ties.

    Returns None when the labels hold no positives or no negatives.
    """
    s = np.asarray(scores, dtype=np.float64).ravel()
    y = np.asarray(labels).ravel()
    if s.shape != y.shape:
        raise ValueError(f"scores ({s.size}) and labels ({y.size}) differ in length")
    if not np.all((y == 0) | (y == 1)):
        raise ValueError("labels must be 0 or 1")
    pos = y == 1
    n_pos = int(pos.sum())
    n_neg = y.size - n_pos
    if n_pos == 0 or n_neg == 0:
        return None
    ranks = rankdata(s, method="average")
    u = ranks[pos].sum() - n_pos * (n_pos + 1) / 2
    return float(u / (n_pos * n_neg))


def micro_auc(scores, labels) -> Optional[float]:
    """AUC over every (sample, label) pair pooled together."""
    return roc_auc(np.asarray(scores).ravel(), np.asarray(labels).ravel())


def threshold_metrics(scores, labels, threshold: float = 0.5) -> dict:
    """Per-label accuracy and F1 after predicting ``score >= threshold``.

    F1 is 0 when precision + recall is 0.
    """
    p = np.asarray(scores, dtype=np.float64)
    y = np.asarray(labels).astype(bool)
    if p.ndim == 1:
        p, y = p[:, None], y[:, None]
    pred = p >= threshold
    tp = (pred & y).sum(axis=0)
    fp = (pred & ~y).sum(axis=0)
    fn = (~pred & y).sum(axis=0)
    acc = (pred == y).mean(axis=0)
    denom = 2 * tp + fp + fn
    f1 = np.where(denom > 0, 2 * tp / np.maximum(denom, 1), 0.0)
    return {
        "acc_per_label": acc.tolist(),
        "f1_per_label": f1.tolist(),
        "acc": float(acc.mean()),
        "acc_micro": float((pred == y).mean()),
        "f1": float(f1.mean()),
    }


@dataclass
class MetricsReport:
    auc_per_label: list
    auc_macro: Optional[float]
    auc_micro: Optional[float]
    acc_per_label: list
    acc: float
    acc_micro: float
    f1_per_label: list
    f1: float
    loss: Optional[float] = None

    def to_dict(self) -> dict:
        return asdict(self)


def evaluate_logits(logits, labels, loss: Optional[float] = None) -> MetricsReport:
    logits = np.asarray(logits, dtype=np.float64)
    labels = np.asarray(labels)
    if logits.shape != labels.shape:
        raise ValueError(f"logits {logits.shape} and labels {labels.shape} differ")
    probs = stable_sigmoid(logits)
    per = [roc_auc(probs[:, j], labels[:, j]) for j in range(labels.shape[1])]
    defined = [a for a in per if a is not None]
    macro = float(np.mean(defined)) if defined else None
    th = threshold_metrics(probs, labels)
    return MetricsReport(
        auc_per_label=per,
        auc_macro=macro,
        auc_micro=micro_auc(probs, labels),
        acc_per_label=th["acc_per_label"],
        acc=th["acc"],
        acc_micro=th["acc_micro"],
        f1_per_label=th["f1_per_label"],
        f1=th["f1"],
        loss=loss,
    )


def _fmt(v) -> str:
    return "NaN" if v is None or math.isnan(v) else f"{v:.4f}"


def format_auc_table(report: MetricsReport, labels) -> str:
    """Per-pathology AUC rows with ``NaN`` for undefined labels."""
    lines = ["Pathology  AUC"]
    for name, a in zip(labels, report.auc_per_label):
        lines.append(f"{name:<10} {_fmt(a)}")
    lines.append(f"{'macro':<10} {_fmt(report.auc_macro)}")
    lines.append(f"{'micro':<10} {_fmt(report.auc_micro)}")
    lines.append(f"accuracy   {report.acc:.4f} (micro {report.acc_micro:.4f})")
    lines.append(f"F1         {report.f1:.4f}")
    if report.loss is not None:
        lines.append(f"loss       {report.loss:.4f}")
    return "\n".join(lines)
