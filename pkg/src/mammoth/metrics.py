"""Evaluation metrics: balanced accuracy, AUROC, k-means, adjusted Rand index,
and the cluster-preservation score for the dimensionality-reducing projection.
"""

from __future__ import annotations

from dataclasses import dataclass, asdict

import numpy as np


# ---------------------------------------------------------------------------
# classification metrics
# ---------------------------------------------------------------------------

@dataclass
class MetricReport:
    balanced_accuracy: float
    auroc: float | None            # binary tasks only
    per_class_recall: dict
    confusion: list                # rows = true class, cols = predicted

    def to_dict(self):
        return asdict(self)


def balanced_accuracy(preds, labels) -> float:
    """Mean over classes of within-class accuracy (per-class recall)."""
    preds, labels = np.asarray(preds), np.asarray(labels)
    if preds.shape != labels.shape:
        raise ValueError(f"length mismatch: {preds.shape} vs {labels.shape}")
    classes = np.unique(labels)
    if classes.size == 0:
        raise ValueError("no labels given")
    recalls = [(preds[labels == c] == c).mean() for c in classes]
    return float(np.mean(recalls))


def per_class_recall(preds, labels) -> dict:
    preds, labels = np.asarray(preds), np.asarray(labels)
    return {int(c): float((preds[labels == c] == c).mean()) for c in np.unique(labels)}


def confusion_matrix(preds, labels, num_classes: int) -> np.ndarray:
    mat = np.zeros((num_classes, num_classes), dtype=np.int64)
    for p, t in zip(preds, labels):
        mat[int(t), int(p)] += 1
    return mat


def auroc(scores, labels) -> float:
    """P(random positive outranks random negative), ties counted half.

    Computed in Mann-Whitney form from average ranks, so it is O(n log n)
    rather than the O(n^2) pair count the tests check it against.
    """
    scores, labels = np.asarray(scores, dtype=np.float64), np.asarray(labels)
    if scores.shape != labels.shape:
        raise ValueError(f"length mismatch: {scores.shape} vs {labels.shape}")
    pos = labels == 1
    n_pos, n_neg = int(pos.sum()), int((~pos).sum())
    if n_pos == 0 or n_neg == 0:
        raise ValueError("AUROC needs both classes present")
    order = np.argsort(scores, kind="mergesort")
    ranks = np.empty_like(scores)
    ranks[order] = np.arange(1, scores.size + 1, dtype=np.float64)
    # average ranks across ties
    sorted_scores = scores[order]
    i = 0
    while i < scores.size:
        j = i
        while j + 1 < scores.size and sorted_scores[j + 1] == sorted_scores[i]:
            j += 1
        if j > i:
            ranks[order[i:j + 1]] = 0.5 * (i + 1 + j + 1)
        i = j + 1
    u = ranks[pos].sum() - n_pos * (n_pos + 1) / 2.0
    return float(u / (n_pos * n_neg))


def metric_report(preds, labels, scores=None, num_classes=None) -> MetricReport:
    num_classes = num_classes or int(np.max(labels)) + 1
    roc = None
    if num_classes == 2 and scores is not None and len(set(np.asarray(labels).tolist())) == 2:
        roc = auroc(scores, labels)
    return MetricReport(
        balanced_accuracy=balanced_accuracy(preds, labels),
        auroc=roc,
        per_class_recall=per_class_recall(preds, labels),
        confusion=confusion_matrix(preds, labels, num_classes).tolist(),
    )


# ---------------------------------------------------------------------------
# clustering
# ---------------------------------------------------------------------------

def _squared_distances(x, centers):
    return ((x[:, None, :] - centers[None, :, :]) ** 2).sum(axis=2)


def _kmeans_pp_seed(x, k, rng):
    n = x.shape[0]
    centers = [x[int(rng.integers(0, n))]]
    for _ in range(k - 1):
        d2 = _squared_distances(x, np.asarray(centers)).min(axis=1)
        total = d2.sum()
        if total <= 0:
            idx = int(rng.integers(0, n))
        else:
            idx = int(rng.choice(n, p=d2 / total))
        centers.append(x[idx])
    return np.asarray(centers, dtype=np.float64)


def _lloyd(x, k, iters, rng):
    centers = _kmeans_pp_seed(x, k, rng)
    assign = np.full(x.shape[0], -1, dtype=np.int64)
    for _ in range(iters):
        d2 = _squared_distances(x, centers)
        new_assign = d2.argmin(axis=1)
        for c in range(k):
            members = new_assign == c
            if members.any():
                centers[c] = x[members].mean(axis=0)
            else:
                farthest = d2.min(axis=1).argmax()
                centers[c] = x[farthest]
                new_assign[farthest] = c
        if np.array_equal(new_assign, assign):
            break
        assign = new_assign
    inertia = float(_squared_distances(x, centers).min(axis=1).sum())
    return assign, centers, inertia


def kmeans(x, k: int, iters: int = 100, rng=None, n_init: int = 4):
    """Lloyd's algorithm with k-means++ seeding, best inertia of n_init runs.

    Each run stops at ``iters`` iterations or when assignments no longer
    change; an emptied cluster is re-seeded at the point farthest from
    its assigned center.  Returns (assignments, centers).
    """
    x = np.asarray(x, dtype=np.float64)
    if x.shape[0] < k:
        raise ValueError(f"need at least k={k} points, got {x.shape[0]}")
    rng = rng or np.random.default_rng(0)
    best = None
    for _ in range(max(1, n_init)):
        assign, centers, inertia = _lloyd(x, k, iters, rng)
        if best is None or inertia < best[2]:
            best = (assign, centers, inertia)
    return best[0], best[1]


def _comb2(n):
    return n * (n - 1) // 2


def adjusted_rand_index(a, b) -> float:
    """Chance-corrected partition agreement from the pair-counting table."""
    a, b = np.asarray(a), np.asarray(b)
    if a.shape != b.shape:
        raise ValueError(f"length mismatch: {a.shape} vs {b.shape}")
    _, ai = np.unique(a, return_inverse=True)
    _, bi = np.unique(b, return_inverse=True)
    table = np.zeros((ai.max() + 1, bi.max() + 1), dtype=np.int64)
    np.add.at(table, (ai, bi), 1)
    sum_ij = sum(_comb2(int(v)) for v in table.reshape(-1))
    sum_a = sum(_comb2(int(v)) for v in table.sum(axis=1))
    sum_b = sum(_comb2(int(v)) for v in table.sum(axis=0))
    total = _comb2(a.size)
    expected = sum_a * sum_b / total if total else 0.0
    max_index = 0.5 * (sum_a + sum_b)
    if max_index == expected:
        # both partitions degenerate the same way; identical -> perfect score
        return 1.0 if np.array_equal(ai, bi) else 0.0
    return float((sum_ij - expected) / (max_index - expected))


def projection_ari(feature_sets, w: np.ndarray, k: int, seed: int = 0) -> float:
    """Mean per-bag ARI between k-means on raw features and on x @ W^T.

    Both clusterings run with the same per-bag seed, so an identity
    projection scores exactly 1.
    """
    scores = []
    for i, feats in enumerate(feature_sets):
        feats = np.asarray(feats, dtype=np.float64)
        ref, _ = kmeans(feats, k, rng=np.random.default_rng(seed + i))
        proj, _ = kmeans(feats @ w.T, k, rng=np.random.default_rng(seed + i))
        scores.append(adjusted_rand_index(ref, proj))
    return float(np.mean(scores))
