"""Lloyd's k-means with k-means++ seeding, used to initialize VLAD anchors."""
from __future__ import annotations

import numpy as np

MAX_ITER = 100
REL_TOL = 1e-7


def _sq_dists(x: np.ndarray, centers: np.ndarray) -> np.ndarray:
    d = (x * x).sum(1)[:, None] - 2.0 * x @ centers.T + (centers * centers).sum(1)[None, :]
    return np.maximum(d, 0.0)


def kmeans_plusplus(x: np.ndarray, k: int, rng: np.random.Generator) -> np.ndarray:
    m = x.shape[0]
    centers = np.empty((k, x.shape[1]), dtype=x.dtype)
    centers[0] = x[rng.integers(m)]
    closest = _sq_dists(x, centers[:1])[:, 0]
    for j in range(1, k):
        total = closest.sum()
        if total > 0:
            idx = rng.choice(m, p=closest / total)
        else:
            idx = rng.integers(m)
        centers[j] = x[idx]
        closest = np.minimum(closest, _sq_dists(x, centers[j : j + 1])[:, 0])
    return centers


def kmeans(
    points: np.ndarray,
    k: int,
    seed: int | np.random.Generator | None = 0,
    max_iter: int = MAX_ITER,
    tol: float = REL_TOL,
    init: np.ndarray | None = None,
) -> np.ndarray:
    """Cluster ``points`` (M x D) into ``k`` centers.

    Deterministic for a given seed. Clusters that become empty are re-seeded at
    the point farthest from its current center. ``init`` replaces the
    k-means++ seeding.
    """
    x = np.asarray(points)
    if x.ndim != 2:
        raise ValueError(f"points must be M x D, got shape {x.shape}")
    if k < 1:
        raise ValueError("k must be >= 1")
    if x.shape[0] < k:
        raise ValueError(f"need at least k={k} points, got {x.shape[0]}")
    if x.dtype.kind != "f":
        x = x.astype(np.float64)
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)

    if init is None:
        centers = kmeans_plusplus(x, k, rng)
    else:
        centers = np.array(init, dtype=x.dtype)
        if centers.shape != (k, x.shape[1]):
            raise ValueError(f"init must have shape {(k, x.shape[1])}")
    for _ in range(max_iter):
        d = _sq_dists(x, centers)
        labels = d.argmin(1)
        counts = np.bincount(labels, minlength=k)
        new = np.zeros_like(centers)
        np.add.at(new, labels, x)
        nonempty = counts > 0
        new[nonempty] /= counts[nonempty, None]
        if not nonempty.all():
            own = d[np.arange(len(x)), labels]
            order = np.argsort(-own, kind="stable")
            taken = 0
            for j in np.flatnonzero(~nonempty):
                new[j] = x[order[taken]]
                taken += 1
        shift = np.linalg.norm(new - centers)
        scale = max(np.linalg.norm(centers), np.finfo(x.dtype).tiny)
        centers = new
        if shift / scale < tol:
            break
    return centers


def assign(points: np.ndarray, centers: np.ndarray) -> np.ndarray:
    return _sq_dists(np.asarray(points), np.asarray(centers)).argmin(1)
