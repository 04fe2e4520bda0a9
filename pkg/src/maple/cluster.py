"""K-Means and X-Means with spherical-Gaussian BIC model selection."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .errors import DegenerateVarianceError


@dataclass
class ClusterModel:
    centroids: np.ndarray
    assignments: np.ndarray
    inertia: float
    history: list[float] = field(default_factory=list, compare=False)

    @property
    def k(self) -> int:
        return self.centroids.shape[0]

    def sizes(self) -> np.ndarray:
        return np.bincount(self.assignments, minlength=self.k)


def _sq_dists(points: np.ndarray, centroids: np.ndarray) -> np.ndarray:
    diff = points[:, None, :] - centroids[None, :, :]
    return np.einsum("mkd,mkd->mk", diff, diff)


def _kmeanspp(points: np.ndarray, k: int, rng: np.random.Generator) -> np.ndarray:
    m = points.shape[0]
    chosen = [int(rng.integers(m))]
    closest = _sq_dists(points, points[chosen]).min(axis=1)
    for _ in range(1, k):
        total = closest.sum()
        if total <= 0:
            # every point coincides with a chosen centre; take the first unused index
            unused = np.setdiff1d(np.arange(m), chosen)
            idx = int(unused[0])
        else:
            idx = int(np.searchsorted(np.cumsum(closest), rng.random() * total, side="right"))
            idx = min(idx, m - 1)
        chosen.append(idx)
        closest = np.minimum(closest, _sq_dists(points, points[[idx]])[:, 0])
    return points[chosen].copy()


def _repair_empty(points, assign, d2):
    """Move the point farthest from its centroid into each empty cluster."""
    k = d2.shape[1]
    counts = np.bincount(assign, minlength=k)
    for j in np.flatnonzero(counts == 0):
        own = d2[np.arange(len(assign)), assign].copy()
        # never strip a cluster down to zero members
        own[counts[assign] <= 1] = -1.0
        far = int(np.argmax(own))
        counts[assign[far]] -= 1
        assign[far] = j
        counts[j] = 1
    return assign


def _means(points, assign, k):
    sums = np.zeros((k, points.shape[1]))
    np.add.at(sums, assign, points)
    return sums / np.bincount(assign, minlength=k)[:, None]


def kmeans(points, k: int, seed=0, max_iter: int = 100, init=None) -> ClusterModel:
    """Lloyd's algorithm from k-means++ seeding (or explicit ``init`` centroids).

    Iterates until the assignment vector stops changing or ``max_iter``
    rounds. The returned centroids are the exact means of their members.
    """
    points = np.asarray(points, dtype=np.float64)
    m = points.shape[0]
    if k < 1 or m < k:
        raise ValueError(f"kmeans needs 1 <= k <= M, got k={k}, M={m}")
    if init is None:
        rng = np.random.default_rng(seed)
        centroids = _kmeanspp(points, k, rng)
    else:
        centroids = np.array(init, dtype=np.float64)
    assign = None
    history = []
    for _ in range(max_iter):
        d2 = _sq_dists(points, centroids)
        new = _repair_empty(points, np.argmin(d2, axis=1), d2)
        if assign is not None and np.array_equal(new, assign):
            break
        assign = new
        centroids = _means(points, assign, k)
        history.append(float(_sq_dists(points, centroids)[np.arange(m), assign].sum()))
    centroids = _means(points, assign, k)
    inertia = float(_sq_dists(points, centroids)[np.arange(m), assign].sum())
    return ClusterModel(centroids, assign, inertia, history)


def bic_terms(m: int, d: int, sizes, inertia: float) -> tuple[float, float]:
    """Return ``(log_likelihood, penalty)``; BIC is their difference.

    Shared per-dimension variance ``inertia / (d (M - K))`` and mixing
    weights ``M_j / M``; ``K (d + 1)`` free parameters.
    """
    sizes = np.asarray(sizes, dtype=np.float64)
    kc = sizes.size
    if m <= kc:
        raise ValueError(f"BIC needs more points than clusters (M={m}, K={kc})")
    var = inertia / (d * (m - kc))
    if not var > 0:
        raise DegenerateVarianceError("all points coincide with their centroids; variance estimate is zero")
    nz = sizes[sizes > 0]
    loglik = float(np.sum(nz * np.log(nz / m)) - 0.5 * m * d * math.log(2 * math.pi * var) - inertia / (2 * var))
    penalty = 0.5 * kc * (d + 1) * math.log(m)
    return loglik, penalty


def bic(points, model: ClusterModel) -> float:
    """Spherical-Gaussian BIC of ``model`` on ``points``; larger is better."""
    points = np.asarray(points, dtype=np.float64)
    m, d = points.shape
    loglik, penalty = bic_terms(m, d, model.sizes(), model.inertia)
    return loglik - penalty


def _split_candidate(members: np.ndarray, seed):
    """Local 2-means on one cluster, seeded along its principal axis."""
    mu = members.mean(axis=0)
    cov = np.cov(members, rowvar=False, bias=True).reshape(members.shape[1], members.shape[1])
    vals, vecs = np.linalg.eigh(cov)
    lam = max(vals[-1], 0.0)
    v = vecs[:, -1]
    if lam <= 0:
        return None
    offset = math.sqrt(2.0 * lam / math.pi) * v
    child = kmeans(members, 2, seed=seed, init=np.stack([mu + offset, mu - offset]))
    if np.any(child.sizes() == 0):
        return None
    return child


def xmeans(points, max_clusters: int = 5, seed=0, max_iter: int = 100) -> ClusterModel:
    """X-Means: grow from one cluster by BIC-approved binary splits.

    Each round proposes a split for every cluster and accepts those whose
    local two-cluster BIC beats the one-cluster BIC, best improvement first,
    without exceeding ``max_clusters``. A global Lloyd pass follows each
    round that changed the structure.
    """
    points = np.asarray(points, dtype=np.float64)
    m, d = points.shape
    if m < 2:
        raise ValueError("xmeans needs at least two points")
    if max_clusters < 1:
        raise ValueError("max_clusters must be >= 1")
    model = kmeans(points, 1, seed=seed, max_iter=max_iter)
    while model.k < max_clusters:
        proposals = []
        for j in range(model.k):
            members = points[model.assignments == j]
            if members.shape[0] < 3:
                continue
            child = _split_candidate(members, seed)
            if child is None:
                continue
            parent = ClusterModel(members.mean(axis=0, keepdims=True), np.zeros(len(members), dtype=np.int64),
                                  float(((members - members.mean(axis=0)) ** 2).sum()))
            try:
                parent_bic = bic(members, parent)
            except DegenerateVarianceError:
                continue
            try:
                child_bic = bic(members, child)
            except DegenerateVarianceError:
                child_bic = math.inf
            if child_bic > parent_bic:
                proposals.append((child_bic - parent_bic, j, child))
        if not proposals:
            break
        proposals.sort(key=lambda p: (-p[0], p[1]))
        budget = max_clusters - model.k
        split = {j: child for _, j, child in proposals[:budget]}
        centroids = []
        for j in range(model.k):
            if j in split:
                centroids.extend(split[j].centroids)
            else:
                centroids.append(model.centroids[j])
        model = kmeans(points, len(centroids), init=np.array(centroids), max_iter=max_iter)
    return model
