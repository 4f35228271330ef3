"""Label distributions (true, inferred, privatized) and K-means client clustering."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from fedlab.errors import ConfigurationError, DimensionError
from fedlab.nn import ModelParams, forward, softmax

SOURCES = ("true", "inferred", "dp-noised")


@dataclass(frozen=True, eq=False)
class LabelDistVector:
    probs: np.ndarray
    source: str = "true"
    client_id: int | None = None

    def __post_init__(self):
        if self.source not in SOURCES:
            raise ValueError(f"unknown source {self.source!r}")
        p = np.array(self.probs, dtype=np.float64)
        p.flags.writeable = False
        object.__setattr__(self, "probs", p)

    def to_json(self) -> dict:
        return {"client_id": self.client_id, "source": self.source, "probs": [float(v) for v in self.probs]}


def label_distribution(labels, m: int, client_id=None) -> LabelDistVector:
    """Class frequencies of one client's labels."""
    labels = np.asarray(labels)
    if labels.size == 0:
        raise ValueError("label distribution of an empty client is undefined")
    counts = np.bincount(labels, minlength=m)
    return LabelDistVector(counts / labels.size, "true", client_id)


def uniform_probes(r: int, d: int, seed) -> np.ndarray:
    return np.random.default_rng([seed, 0x9B]).uniform(0.0, 1.0, size=(r, d))


def infer_label_distribution(model: ModelParams, r: int = 10_000, d: int | None = None, seed=0, client_id=None,
                             chunk: int = 4096) -> LabelDistVector:
    """Mean softmax output of ``model`` over ``r`` uniform-[0,1]^d random inputs."""
    if r < 1:
        raise ValueError("need at least one probe")
    d = model.layer_dims[0] if d is None else d
    if d != model.layer_dims[0]:
        raise DimensionError(f"model takes {model.layer_dims[0]} inputs, probes have {d}")
    probes = uniform_probes(r, d, seed)
    total = np.zeros(model.layer_dims[-1])
    for start in range(0, r, chunk):
        total += softmax(forward(model, probes[start : start + chunk])[1]).sum(axis=0)
    return LabelDistVector(total / r, "inferred", client_id)


def laplace_scale(epsilon: float, sensitivity: float = 1.0) -> float:
    if not epsilon > 0:
        raise ValueError("epsilon must be positive")
    return sensitivity / epsilon


def laplace_mechanism(values, epsilon: float, rng, sensitivity: float = 1.0) -> np.ndarray:
    """``values`` plus i.i.d. Laplace(0, sensitivity/epsilon) noise, unprojected."""
    values = np.asarray(values, dtype=np.float64)
    rng = np.random.default_rng(rng)
    return values + rng.laplace(0.0, laplace_scale(epsilon, sensitivity), size=values.shape)


def project_to_simplex(v) -> np.ndarray:
    """Clip at zero and renormalize; an all-zero result becomes uniform."""
    v = np.clip(np.asarray(v, dtype=np.float64), 0.0, None)
    s = v.sum()
    if not s > 0 or not np.isfinite(s):
        return np.full(v.shape, 1.0 / v.size)
    return v / s


def laplace_noise(dist: LabelDistVector, epsilon: float, seed) -> LabelDistVector:
    # label distributions have L1 sensitivity 1
    noisy = laplace_mechanism(dist.probs, epsilon, np.random.default_rng([seed, 0xD9]), sensitivity=1.0)
    return LabelDistVector(project_to_simplex(noisy), "dp-noised", dist.client_id)


# -- K-means -----------------------------------------------------------------


@dataclass(frozen=True, eq=False)
class ClusterAssignment:
    labels: np.ndarray
    centroids: np.ndarray
    objective: float
    history: tuple = field(default=(), repr=False)

    @property
    def K(self) -> int:
        return self.centroids.shape[0]

    def members(self) -> list:
        return [np.flatnonzero(self.labels == k) for k in range(self.K)]

    def sizes(self) -> list:
        return np.bincount(self.labels, minlength=self.K).tolist()

    def to_json(self) -> dict:
        return {
            "K": self.K,
            "labels": self.labels.tolist(),
            "centroids": self.centroids.tolist(),
            "objective": self.objective,
        }


def wcss(points, labels, centroids) -> float:
    points = np.asarray(points, dtype=np.float64)
    diff = points - np.asarray(centroids)[np.asarray(labels)]
    return float(np.sum(diff * diff))


def _sq_dists(points, centroids):
    return ((points[:, None, :] - centroids[None, :, :]) ** 2).sum(axis=2)


def _centroids(points, labels, K):
    return np.stack([points[labels == k].mean(axis=0) for k in range(K)])


def _lloyd(points, K, rng, max_iter):
    N = points.shape[0]
    centroids = points[rng.choice(N, size=K, replace=False)].copy()
    labels = None
    history = []
    for _ in range(max_iter):
        d2 = _sq_dists(points, centroids)
        new = np.argmin(d2, axis=1)  # first minimum: lowest centroid index
        sizes = np.bincount(new, minlength=K)
        if np.any(sizes == 0):
            order = rng.permutation(N)
            for k in np.flatnonzero(sizes == 0):
                own = d2[np.arange(N), new]
                movable = sizes[new] > 1
                cand = order[movable[order]]
                far = cand[np.argmax(own[cand])]
                sizes[new[far]] -= 1
                new[far] = k
                sizes[k] += 1
                centroids[k] = points[far]
                d2[far, k] = 0.0
        if not history:
            history.append(wcss(points, new, centroids))
        if labels is not None and np.array_equal(new, labels):
            break
        labels = new
        centroids = _centroids(points, labels, K)
        history.append(wcss(points, labels, centroids))
    return labels, centroids, history


def kmeans(points, K: int, seed=0, max_iter: int = 300, n_init: int = 10) -> ClusterAssignment:
    """Lloyd's algorithm from ``K`` distinct seeded starting points.

    ``n_init`` independent seeded starts are run and the lowest objective kept
    (earliest start wins ties). ``history`` holds the objective before the first
    update and after every update of the kept run.
    """
    points = np.asarray(points, dtype=np.float64)
    N = points.shape[0]
    if not 1 <= K <= N:
        raise ValueError(f"K={K} must lie in [1, {N}]")
    best = None
    for start in range(n_init):
        rng = np.random.default_rng([seed, 0x1D, start])
        labels, centroids, history = _lloyd(points, K, rng, max_iter)
        obj = wcss(points, labels, centroids)
        if best is None or obj < best.objective:
            best = ClusterAssignment(labels, centroids, obj, tuple(history))
    return best


def kmeans_balanced(points, K: int, cap_factor: float = 1.2, seed=0, **kw) -> ClusterAssignment:
    """K-means, then relocate far members out of oversized clusters.

    While some cluster holds more than ``ceil(cap_factor*N/K)`` points, its
    member farthest from its centroid moves to the nearest cluster still under
    the cap, and both centroids are recomputed.
    """
    points = np.asarray(points, dtype=np.float64)
    N = points.shape[0]
    cap = math.ceil(cap_factor * N / K - 1e-12)
    if cap * K < N:
        raise ConfigurationError(f"cap {cap} x {K} clusters cannot hold {N} points")
    base = kmeans(points, K, seed=seed, **kw)
    labels = base.labels.copy()
    centroids = base.centroids.copy()
    sizes = np.bincount(labels, minlength=K)
    moved = False
    while sizes.max() > cap:
        src = int(np.argmax(sizes > cap))
        members = np.flatnonzero(labels == src)
        dist = ((points[members] - centroids[src]) ** 2).sum(axis=1)
        # largest distance first, then lowest client index
        far = members[np.lexsort((members, -dist))[0]]
        open_ = np.flatnonzero(sizes < cap)
        dto = ((centroids[open_] - points[far]) ** 2).sum(axis=1)
        dst = int(open_[np.lexsort((open_, dto))[0]])
        labels[far] = dst
        sizes[src] -= 1
        sizes[dst] += 1
        centroids[src] = points[labels == src].mean(axis=0)
        centroids[dst] = points[labels == dst].mean(axis=0)
        moved = True
    if not moved:
        return base
    return ClusterAssignment(labels, centroids, wcss(points, labels, centroids), base.history)


def wcss_curve(points, k_max: int, seed=0, **kw) -> list:
    return [kmeans(points, k, seed=seed, **kw).objective for k in range(1, k_max + 1)]


def elbow_select_k(points, k_max: int, seed=0, **kw) -> int:
    """Cluster count with the largest discrete second difference of WCSS(k)."""
    points = np.asarray(points, dtype=np.float64)
    if not 2 <= k_max <= points.shape[0]:
        raise ValueError(f"k_max={k_max} must lie in [2, {points.shape[0]}]")
    if k_max < 3:
        return 2
    w = wcss_curve(points, k_max, seed=seed, **kw)
    best_k, best = 2, -np.inf
    for k in range(2, k_max):
        curv = w[k - 2] - 2 * w[k - 1] + w[k]
        if curv > best + 1e-12:
            best_k, best = k, curv
    return best_k
