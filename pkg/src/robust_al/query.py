"""Query strategies: cluster-then-maximin diversity selection and random.

Clustering is Lloyd's algorithm from k-means++ seeding; the cluster count can
be picked by mean silhouette score over a candidate range. Within each
cluster the batch is built greedily: every pick maximizes its minimum
distance to the labeled set plus the picks made so far.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .instances import Instance, stack
from .model import ModelState, features_batch

KMEANS_MAX_ITERS = 100


@dataclass
class ClusterModel:
    centers: np.ndarray                 # (n, d)
    assignment: dict[int, int]          # point id -> cluster index
    inertia: float
    inertia_history: tuple[float, ...] = ()


@dataclass
class QueryBatch:
    selected: list[int] = field(default_factory=list)
    per_cluster_counts: dict[int, int] = field(default_factory=dict)
    short: bool = False


def _sq_dists(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Squared Euclidean distances, (len(a), len(b))."""
    diff = a[:, None, :] - b[None, :, :]
    return np.einsum("ijk,ijk->ij", diff, diff)


def _kmeanspp_centers(points: np.ndarray, n: int, rng: np.random.Generator):
    idx = [int(rng.integers(len(points)))]
    d2 = _sq_dists(points, points[idx[-1]][None, :])[:, 0]
    while len(idx) < n:
        total = d2.sum()
        if total <= 0:
            # all remaining mass at chosen centers (duplicate points)
            idx.append(int(rng.integers(len(points))))
        else:
            probs = d2 / total
            idx.append(int(rng.choice(len(points), p=probs)))
        d2 = np.minimum(d2, _sq_dists(points, points[idx[-1]][None, :])[:, 0])
    return points[idx].copy()


def kmeans(points, n: int, seed: int, ids=None) -> ClusterModel:
    """Lloyd's iterations until assignments stabilize (or 100 rounds)."""
    pts = np.asarray(points, dtype=np.float64)
    if n < 1:
        raise ValueError("need at least one cluster")
    if n > len(pts):
        raise ValueError(f"cannot form {n} clusters from {len(pts)} points")
    if ids is None:
        ids = list(range(len(pts)))
    rng = np.random.default_rng(seed)
    centers = _kmeanspp_centers(pts, n, rng)

    prev = None
    history = []
    assign = None
    for _ in range(KMEANS_MAX_ITERS):
        d2 = _sq_dists(pts, centers)
        assign = d2.argmin(axis=1)
        # reseed empty clusters at the point farthest from its center
        for c in range(n):
            if not np.any(assign == c):
                far = int(np.argmax(d2[np.arange(len(pts)), assign]))
                centers[c] = pts[far]
                d2 = _sq_dists(pts, centers)
                assign = d2.argmin(axis=1)
        for c in range(n):
            centers[c] = pts[assign == c].mean(axis=0)
        inertia = float(_sq_dists(pts, centers)[np.arange(len(pts)), assign].sum())
        history.append(inertia)
        if prev is not None and np.array_equal(assign, prev):
            break
        prev = assign
    return ClusterModel(centers, {ids[i]: int(assign[i]) for i in range(len(pts))},
                        history[-1], tuple(history))


def silhouette_mean(points: np.ndarray, labels: np.ndarray) -> float:
    """Mean silhouette over all points; singleton clusters score 0."""
    n = len(points)
    d = np.sqrt(np.maximum(_sq_dists(points, points), 0.0))
    clusters = np.unique(labels)
    scores = np.zeros(n)
    for i in range(n):
        own = labels[i]
        same = labels == own
        n_same = same.sum()
        if n_same <= 1:
            continue  # silhouette of a singleton is 0
        a = d[i, same].sum() / (n_same - 1)
        b = min(d[i, labels == c].mean() for c in clusters if c != own)
        denom = max(a, b)
        scores[i] = 0.0 if denom == 0 else (b - a) / denom
    return float(scores.mean())


def choose_n(points, candidate_range: tuple[int, int], seed: int) -> int:
    """Cluster count in the range maximizing mean silhouette; ties go low."""
    pts = np.asarray(points, dtype=np.float64)
    if len(pts) < 4:
        raise ValueError("need at least 4 points to choose a cluster count")
    if np.ptp(pts, axis=0).max() == 0:
        raise ValueError("degenerate input: all points identical")
    lo, hi = candidate_range
    lo = max(2, lo)
    hi = min(hi, len(pts) // 2)
    if hi < lo:
        raise ValueError(f"empty candidate range after clamping: ({lo}, {hi})")
    best_n, best_score = None, -np.inf
    for n in range(lo, hi + 1):
        cm = kmeans(pts, n, seed=seed * 1000003 + n)
        labels = np.array([cm.assignment[i] for i in range(len(pts))])
        score = silhouette_mean(pts, labels)
        if score > best_score:  # strict: ties keep the smaller n
            best_n, best_score = n, score
    return best_n


def maximin_select(candidates, labeled, count: int,
                   feature_model: ModelState | None = None) -> list[Instance]:
    """Greedy farthest-first picks from candidates against the labeled set.

    Distances are Euclidean, either in raw input space or in the model's
    feature space when a model is supplied. Ties go to the lowest instance
    id. Asking for more points than available returns all candidates.
    """
    if not candidates:
        raise ValueError("no candidates to select from")
    if not labeled:
        raise ValueError("maximin needs a non-empty labeled set")
    if count < 1:
        raise ValueError("selection count must be positive")
    cands = sorted(candidates, key=lambda inst: inst.id)
    cand_vecs = stack(cands)
    lab_vecs = stack(labeled)
    if feature_model is not None:
        cand_vecs = features_batch(feature_model, cand_vecs)
        lab_vecs = features_batch(feature_model, lab_vecs)

    min_d2 = _sq_dists(cand_vecs, lab_vecs).min(axis=1)
    picked: list[Instance] = []
    for _ in range(min(count, len(cands))):
        i = int(np.argmax(min_d2))  # first max = lowest id (sorted order)
        picked.append(cands[i])
        d2_new = _sq_dists(cand_vecs, cand_vecs[i][None, :])[:, 0]
        min_d2 = np.minimum(min_d2, d2_new)
        min_d2[i] = -np.inf
    return picked


def random_select(pool, k: int, rng: np.random.Generator) -> list[Instance]:
    """Uniform sample without replacement."""
    if k > len(pool):
        raise ValueError(f"cannot sample {k} from a pool of {len(pool)}")
    idx = rng.choice(len(pool), size=k, replace=False)
    return [pool[i] for i in idx]
