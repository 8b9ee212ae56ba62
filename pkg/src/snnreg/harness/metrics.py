"""OOD scoring: predictive entropy, AUROC and FPR at 95% TPR.

OOD samples are the positive class; a higher score means "more likely OOD".
"""
from __future__ import annotations

import numpy as np
from scipy.stats import rankdata

from ..training import softmax


def predictive_entropy(probs) -> np.ndarray:
    p = np.asarray(probs, dtype=np.float64)
    safe = np.where(p > 0, p, 1.0)
    return -(p * np.log(safe)).sum(axis=-1)


def _check(id_scores, ood_scores):
    a = np.asarray(id_scores, dtype=np.float64).reshape(-1)
    b = np.asarray(ood_scores, dtype=np.float64).reshape(-1)
    if a.size == 0 or b.size == 0:
        raise ValueError("ID and OOD score sets must be non-empty")
    return a, b


def auroc(id_scores, ood_scores) -> float:
    """Mann-Whitney statistic with average ranks for ties."""
    a, b = _check(id_scores, ood_scores)
    ranks = rankdata(np.concatenate([a, b]))
    r_ood = ranks[a.size:].sum()
    u = r_ood - b.size * (b.size + 1) / 2.0
    return float(u / (a.size * b.size))


def fpr_at_tpr(id_scores, ood_scores, tpr: float = 0.95) -> float:
    """ID false-positive rate at the strictest threshold keeping OOD recall >= ``tpr``.

    A sample is flagged OOD when its score is >= the threshold.
    """
    a, b = _check(id_scores, ood_scores)
    ood_sorted = np.sort(b)
    # largest threshold t with #(ood >= t) >= ceil(tpr * n): the k-th largest OOD score
    k = int(np.ceil(tpr * b.size - 1e-12))
    k = min(max(k, 1), b.size)
    t = ood_sorted[b.size - k]
    return float(np.mean(a >= t))


def entropy_histogram(scores, bins: int = 20, upper: float | None = None):
    s = np.asarray(scores, dtype=np.float64)
    hi = upper if upper is not None else max(float(s.max()), 1e-12)
    counts, edges = np.histogram(s, bins=bins, range=(0.0, hi))
    return counts.tolist(), edges.tolist()


def ood_eval(id_logits, ood_logits, bins: int = 20) -> dict:
    h_id = predictive_entropy(softmax(id_logits))
    h_ood = predictive_entropy(softmax(ood_logits))
    upper = float(np.log(np.asarray(id_logits).shape[-1]))
    return {
        "auroc": auroc(h_id, h_ood),
        "fpr_at_95_tpr": fpr_at_tpr(h_id, h_ood, 0.95),
        "entropy_histograms": {
            "id": entropy_histogram(h_id, bins, upper),
            "ood": entropy_histogram(h_ood, bins, upper),
        },
    }
