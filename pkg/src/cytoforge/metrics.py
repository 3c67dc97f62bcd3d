"""Classification metrics: rank-based ROC AUC and class-wise / weighted F1."""

from dataclasses import dataclass

import numpy as np
from scipy.stats import rankdata


def auc(scores, labels) -> float:
    """Mann-Whitney estimate of ROC AUC; tied positive/negative pairs count one half."""
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels)
    if scores.shape != labels.shape or scores.ndim != 1:
        raise ValueError("scores and labels must be 1-D and of equal length")
    pos = labels == 1
    n_pos = int(pos.sum())
    n_neg = int((labels == 0).sum())
    if n_pos + n_neg != labels.size:
        raise ValueError("labels must be 0 or 1")
    if n_pos == 0 or n_neg == 0:
        raise ValueError("AUC needs both classes present")
    ranks = rankdata(scores)  # average ranks for ties
    u = ranks[pos].sum() - n_pos * (n_pos + 1) / 2.0
    return float(u / (n_pos * n_neg))


@dataclass
class F1Report:
    per_class_f1: dict
    weighted_f1: float
    support: dict

    def to_json(self) -> dict:
        return {
            "per_class_f1": {str(k): v for k, v in self.per_class_f1.items()},
            "weighted_f1": self.weighted_f1,
            "support": {str(k): v for k, v in self.support.items()},
        }


def f1_report(predictions, labels, class_set) -> F1Report:
    predictions = np.asarray(predictions)
    labels = np.asarray(labels)
    if predictions.shape != labels.shape or labels.size == 0:
        raise ValueError("predictions and labels must be non-empty and of equal length")
    classes = sorted(set(int(c) for c in class_set))
    known = set(classes)
    for arr, what in ((labels, "label"), (predictions, "prediction")):
        bad = set(int(v) for v in np.unique(arr)) - known
        if bad:
            raise ValueError(f"{what} {min(bad)} outside class set {classes}")

    per_class, support = {}, {}
    for c in classes:
        tp = int(np.sum((predictions == c) & (labels == c)))
        n_pred = int(np.sum(predictions == c))
        n_true = int(np.sum(labels == c))
        precision = tp / n_pred if n_pred else 0.0
        recall = tp / n_true if n_true else 0.0
        denom = precision + recall
        per_class[c] = 2.0 * precision * recall / denom if denom > 0 else 0.0
        support[c] = n_true
    total = sum(support.values())
    weighted = sum(support[c] * per_class[c] for c in classes) / total
    return F1Report(per_class, float(weighted), support)
