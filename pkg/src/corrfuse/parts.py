"""Part discovery on token grids: per-image k-means and optimal cluster
matching across an image pair.

k-means is Lloyd's algorithm with k-means++ seeding under an explicit RNG
seed. Empty clusters are repaired deterministically by reseeding from the
token currently farthest from its assigned centroid, so every iteration
ends with k nonempty clusters and the within-cluster inertia never
increases from one iteration to the next.

Cluster matching builds a cosine-distance cost between the two centroid
sets and solves the square assignment problem exactly with the Hungarian
method (potentials formulation, O(k^3)).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .featmap import FeatureMap, ValidationError


@dataclass(frozen=True)
class Clustering:
    """k-means result on one feature grid. ``labels`` has the grid's shape;
    ``inertia_history`` holds the end-of-iteration inertia sequence."""

    k: int
    labels: np.ndarray
    centroids: np.ndarray
    inertia: float
    inertia_history: tuple[float, ...] = ()

    def __post_init__(self):
        labels = np.ascontiguousarray(np.asarray(self.labels, dtype=np.int32))
        centroids = np.ascontiguousarray(np.asarray(self.centroids, dtype=np.float64))
        if centroids.shape[0] != self.k:
            raise ValidationError("centroid count must equal k")
        if labels.min() < 0 or labels.max() >= self.k:
            raise ValidationError("labels must lie in [0, k)")
        if self.inertia < 0:
            raise ValidationError("inertia must be >= 0")
        labels.setflags(write=False)
        centroids.setflags(write=False)
        object.__setattr__(self, "labels", labels)
        object.__setattr__(self, "centroids", centroids)


@dataclass(frozen=True)
class ClusterMatch:
    """Bijective source-to-target cluster assignment and its total cost."""

    assignment: tuple[int, ...]
    cost: float

    def __post_init__(self):
        if sorted(self.assignment) != list(range(len(self.assignment))):
            raise ValidationError("assignment must be a permutation of [0, k)")


def _sq_dists(tokens: np.ndarray, centroids: np.ndarray) -> np.ndarray:
    # (n, k) squared Euclidean distances without forming n*k*c intermediates
    t2 = (tokens**2).sum(axis=1, keepdims=True)
    c2 = (centroids**2).sum(axis=1)
    d2 = t2 + c2 - 2.0 * (tokens @ centroids.T)
    return np.maximum(d2, 0.0)


def _kmeanspp_init(tokens: np.ndarray, k: int, rng: np.random.Generator) -> np.ndarray:
    n = tokens.shape[0]
    chosen = [int(rng.integers(n))]
    d2 = ((tokens - tokens[chosen[0]]) ** 2).sum(axis=1)
    for _ in range(k - 1):
        total = d2.sum()
        if total > 0:
            nxt = int(rng.choice(n, p=d2 / total))
        else:
            # all remaining mass at zero distance: take the first unchosen index
            taken = set(chosen)
            nxt = next(i for i in range(n) if i not in taken)
        chosen.append(nxt)
        d2 = np.minimum(d2, ((tokens - tokens[nxt]) ** 2).sum(axis=1))
    return tokens[chosen].copy()


def kmeans(fmap: FeatureMap, k: int, seed: int, max_iters: int = 100) -> Clustering:
    """Cluster the grid's tokens into k parts; deterministic for a seed."""
    tokens = fmap.tokens().astype(np.float64)
    n = tokens.shape[0]
    if k < 1 or k > n:
        raise ValidationError(f"k={k} out of range [1, {n}]")
    if max_iters < 1:
        raise ValidationError("max_iters must be >= 1")

    rng = np.random.default_rng(seed)
    centroids = _kmeanspp_init(tokens, k, rng)
    labels = np.zeros(n, dtype=np.int64)
    history: list[float] = []
    prev_labels = None
    for _ in range(max_iters):
        d2 = _sq_dists(tokens, centroids)
        labels = np.argmin(d2, axis=1)

        # deterministic farthest-point repair of empty clusters
        counts = np.bincount(labels, minlength=k)
        if (counts == 0).any():
            assigned_d2 = d2[np.arange(n), labels]
            for cluster in np.flatnonzero(counts == 0):
                far = int(np.argmax(assigned_d2))
                if counts[labels[far]] > 1:
                    counts[labels[far]] -= 1
                labels[far] = cluster
                counts[cluster] = 1
                centroids[cluster] = tokens[far]
                assigned_d2[far] = 0.0

        for c in range(k):
            members = tokens[labels == c]
            if members.shape[0]:
                centroids[c] = members.mean(axis=0)

        inertia = float(_sq_dists(tokens, centroids)[np.arange(n), labels].sum())
        if history:
            assert inertia <= history[-1] + 1e-9 * max(1.0, history[-1]), (
                "inertia increased across a Lloyd iteration"
            )
        history.append(inertia)
        if prev_labels is not None and np.array_equal(labels, prev_labels):
            break
        prev_labels = labels.copy()

    return Clustering(
        k=k,
        labels=labels.reshape(fmap.height, fmap.width),
        centroids=centroids,
        inertia=history[-1],
        inertia_history=tuple(history),
    )


def hungarian(cost: np.ndarray) -> ClusterMatch:
    """Exact minimum-cost square assignment (potentials formulation)."""
    cost = np.asarray(cost, dtype=np.float64)
    if cost.ndim != 2 or cost.shape[0] != cost.shape[1]:
        raise ValidationError(f"cost matrix must be square, got {cost.shape}")
    if not np.isfinite(cost).all():
        raise ValidationError("cost matrix has non-finite entries")
    n = cost.shape[0]

    u = np.zeros(n + 1)
    v = np.zeros(n + 1)
    p = np.zeros(n + 1, dtype=np.int64)  # p[j]: row matched to column j (1-based)
    way = np.zeros(n + 1, dtype=np.int64)
    for i in range(1, n + 1):
        p[0] = i
        j0 = 0
        minv = np.full(n + 1, np.inf)
        used = np.zeros(n + 1, dtype=bool)
        while True:
            used[j0] = True
            i0 = p[j0]
            cur = cost[i0 - 1, :] - u[i0] - v[1:]
            better = ~used[1:] & (cur < minv[1:])
            minv[1:][better] = cur[better]
            way[1:][better] = j0
            free = np.flatnonzero(~used[1:]) + 1
            j1 = int(free[np.argmin(minv[free])])
            delta = minv[j1]
            u[p[used]] += delta
            v[used] -= delta
            minv[~used] -= delta
            j0 = j1
            if p[j0] == 0:
                break
        while j0:
            j1 = way[j0]
            p[j0] = p[j1]
            j0 = j1

    assignment = np.zeros(n, dtype=np.int64)
    for j in range(1, n + 1):
        assignment[p[j] - 1] = j - 1
    total = float(cost[np.arange(n), assignment].sum())
    return ClusterMatch(assignment=tuple(int(a) for a in assignment), cost=total)


def match_clusters(src: Clustering, tgt: Clustering) -> ClusterMatch:
    """Match cluster ids across a pair by cosine distance of centroids."""
    if src.k != tgt.k:
        raise ValidationError(f"cluster count mismatch: {src.k} vs {tgt.k}")

    def unit(m):
        norms = np.linalg.norm(m, axis=1, keepdims=True)
        return m / np.where(norms > 0, norms, 1.0)

    cost = 1.0 - unit(src.centroids) @ unit(tgt.centroids).T
    return hungarian(cost)
