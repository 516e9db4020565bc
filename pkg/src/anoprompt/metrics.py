"""AUROC computation, image- and pixel-level.

Rank-based (Mann-Whitney) implementation with average ranks, so ties
count one half exactly; equals the O(P*N) pairwise definition.
"""

from __future__ import annotations

import numpy as np
from scipy.stats import rankdata

from .errors import MetricError


def auroc(scores, labels) -> float:
    """Probability that a random positive outranks a random negative."""
    scores = np.asarray(scores, dtype=np.float64).ravel()
    labels = np.asarray(labels).ravel().astype(np.int64)
    if scores.shape != labels.shape:
        raise MetricError(f"scores {scores.shape} and labels {labels.shape} differ in length")
    n_pos = int((labels == 1).sum())
    n_neg = int((labels == 0).sum())
    if n_pos == 0 or n_neg == 0:
        raise MetricError(
            f"AUROC needs both classes; got {n_pos} positives and {n_neg} negatives"
        )
    ranks = rankdata(scores)
    rank_sum = ranks[labels == 1].sum()
    return float((rank_sum - n_pos * (n_pos + 1) / 2.0) / (n_pos * n_neg))


def pixel_auroc(maps, masks) -> float:
    """AUROC over pixels pooled across the whole test set."""
    flat_scores = []
    flat_labels = []
    for m, gt in zip(maps, masks, strict=True):
        m = np.asarray(m, dtype=np.float64)
        gt = np.asarray(gt)
        if m.shape != gt.shape:
            raise MetricError(f"map shape {m.shape} does not match mask shape {gt.shape}")
        flat_scores.append(m.ravel())
        flat_labels.append((gt > 0.5).ravel())
    scores = np.concatenate(flat_scores)
    labels = np.concatenate(flat_labels).astype(np.int64)
    if labels.sum() == 0:
        raise MetricError("pixel AUROC undefined: no defective pixels in the test set")
    return auroc(scores, labels)
