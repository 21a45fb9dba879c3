"""Synthetic geotagged "time machine" world and weak-supervision tuples.

Each place owns a set of latent landmark prototypes. Every image of a place
is taken during one of several visits (distinct dates and imaging
conditions) and its descriptor map mixes

* noisy copies of a random subset of the place's landmarks, shifted by a
  per-condition offset,
* transient descriptors shared by all images of the same visit only
  (parked cars, scaffolding: consistent within a visit, useless across),
* distractors copied verbatim from a global pool shared by all places.

Descriptor dimensions are split into a landmark, a transient and a distractor
block; ``block_leak`` mixes a little energy across the blocks.
"""
from __future__ import annotations

import logging
import math
from dataclasses import asdict, dataclass, fields
from typing import Sequence

import numpy as np

from .descriptors import DescriptorDataset, ValidationError
from .loss import TrainingTuple

log = logging.getLogger(__name__)

POSITIVE_RADIUS = 10.0
NEGATIVE_RADIUS = 25.0
MIN_DAYS_APART = 31.0
SPLIT_NAMES = ("train", "val", "test")


@dataclass(frozen=True)
class WorldConfig:
    n_places: int = 200
    images_per_place: int = 6
    visits_per_place: int = 3
    n_descriptors: int = 64
    dim: int = 32
    prototypes_per_place: int = 32
    n_landmarks: int = 24
    n_transients: int = 8
    n_distractors: int = 32
    distractor_pool: int = 256
    landmark_dims: int = 16
    transient_dims: int = 8
    block_leak: float = 0.1
    viewpoint_noise: float = 0.2
    condition_shift: float = 0.2
    n_conditions: int = 3
    gps_jitter: float = 2.0
    place_spacing: float = 50.0
    visit_interval_days: float = 90.0
    time_machine: bool = True
    seed: int = 0

    def __post_init__(self):
        counts = ("n_places", "images_per_place", "visits_per_place", "n_descriptors", "dim",
                  "prototypes_per_place", "distractor_pool", "n_conditions", "landmark_dims")
        for name in counts:
            if getattr(self, name) < 1:
                raise ValidationError(f"{name} must be >= 1")
        for name in ("n_landmarks", "n_transients", "n_distractors", "transient_dims"):
            if getattr(self, name) < 0:
                raise ValidationError(f"{name} must be >= 0")
        for name in ("viewpoint_noise", "condition_shift", "gps_jitter", "block_leak"):
            if getattr(self, name) < 0:
                raise ValidationError(f"{name} must be >= 0")
        if self.n_landmarks + self.n_transients + self.n_distractors != self.n_descriptors:
            raise ValidationError("n_landmarks + n_transients + n_distractors must equal n_descriptors")
        if self.n_landmarks > self.prototypes_per_place:
            raise ValidationError("n_landmarks cannot exceed prototypes_per_place")
        if self.landmark_dims + self.transient_dims > self.dim:
            raise ValidationError("landmark_dims + transient_dims must not exceed dim")
        if self.visits_per_place > 1 and self.visit_interval_days < MIN_DAYS_APART + 7:
            raise ValidationError("visit_interval_days too small to keep visits a month apart")
        if self.place_spacing - 6 * self.gps_jitter <= NEGATIVE_RADIUS:
            raise ValidationError("place_spacing too small: neighbouring places could fall within 25 m")

    @classmethod
    def from_dict(cls, d: dict) -> "WorldConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValidationError(f"unknown world config keys: {sorted(unknown)}")
        return cls(**d)

    def to_dict(self) -> dict:
        return asdict(self)


def _block_vectors(rng: np.random.Generator, n: int, dim: int, lo: int, hi: int, leak: float) -> np.ndarray:
    """Gaussian vectors concentrated on dims [lo, hi) with ``leak`` energy elsewhere."""
    v = leak * rng.normal(size=(n, dim)) / math.sqrt(dim)
    v[:, lo:hi] += rng.normal(size=(n, hi - lo)) / math.sqrt(max(hi - lo, 1))
    return v


def _streams(seed: int) -> dict[str, np.random.Generator]:
    names = ("layout", "prototypes", "distractors", "conditions", "visits", "images", "gps")
    children = np.random.SeedSequence(seed).spawn(len(names))
    return {n: np.random.default_rng(s) for n, s in zip(names, children)}


def place_positions(cfg: WorldConfig) -> np.ndarray:
    cols = math.ceil(math.sqrt(cfg.n_places))
    idx = np.arange(cfg.n_places)
    return np.stack([(idx // cols) * cfg.place_spacing, (idx % cols) * cfg.place_spacing], axis=1).astype(float)


def generate_world(cfg: WorldConfig) -> DescriptorDataset:
    """Deterministic synthetic dataset for ``cfg``.

    The latent world (place layout, prototypes, distractor pool, conditions,
    visit contents) does not depend on ``time_machine``; with it disabled
    every image of a place reuses the first visit's date, condition and
    transients.
    """
    rng = _streams(cfg.seed)
    d = cfg.dim
    l_hi = cfg.landmark_dims
    t_hi = l_hi + cfg.transient_dims
    centers = place_positions(cfg)

    protos = _block_vectors(rng["prototypes"], cfg.n_places * cfg.prototypes_per_place, d, 0, l_hi, cfg.block_leak)
    protos = protos.reshape(cfg.n_places, cfg.prototypes_per_place, d)
    pool = _block_vectors(rng["distractors"], cfg.distractor_pool, d, t_hi, d, cfg.block_leak) if t_hi < d else \
        _block_vectors(rng["distractors"], cfg.distractor_pool, d, 0, d, 0.0)
    shifts = rng["conditions"].normal(size=(cfg.n_conditions, d)) / math.sqrt(d) * cfg.condition_shift

    v = cfg.visits_per_place
    visit_days = np.arange(v) * cfg.visit_interval_days + rng["visits"].uniform(0, 7, size=(cfg.n_places, v))
    if cfg.transient_dims > 0:
        transients = _block_vectors(rng["visits"], cfg.n_places * v * cfg.n_transients, d, l_hi, t_hi, cfg.block_leak)
    else:
        transients = _block_vectors(rng["visits"], cfg.n_places * v * cfg.n_transients, d, 0, d, 0.0)
    transients = transients.reshape(cfg.n_places, v, cfg.n_transients, d)

    ids, maps, positions, stamps, conds, places, visits = [], [], [], [], [], [], []
    img_rng, gps_rng = rng["images"], rng["gps"]
    for p in range(cfg.n_places):
        for j in range(cfg.images_per_place):
            visit = j % v
            src = visit if cfg.time_machine else 0
            cond = src % cfg.n_conditions
            sel = img_rng.permutation(cfg.prototypes_per_place)[: cfg.n_landmarks]
            lm = protos[p, sel] + cfg.viewpoint_noise / math.sqrt(d) * img_rng.normal(size=(cfg.n_landmarks, d))
            lm = lm + shifts[cond]
            tr = transients[p, src] + cfg.viewpoint_noise / math.sqrt(d) * img_rng.normal(size=(cfg.n_transients, d))
            dist = pool[img_rng.integers(cfg.distractor_pool, size=cfg.n_distractors)]
            x = np.concatenate([lm, tr, dist])[img_rng.permutation(cfg.n_descriptors)]
            jitter = np.clip(gps_rng.normal(size=2) * cfg.gps_jitter, -3 * cfg.gps_jitter, 3 * cfg.gps_jitter)
            ids.append(f"p{p:04d}_i{j:02d}")
            maps.append(x)
            positions.append(centers[p] + jitter)
            stamps.append(visit_days[p, src])
            conds.append(cond)
            places.append(p)
            visits.append(visit)

    return DescriptorDataset(
        ids=ids,
        descriptors=np.asarray(maps, dtype=np.float32),
        positions=np.asarray(positions),
        timestamps=np.asarray(stamps),
        conditions=np.asarray(conds, dtype=np.int64),
        place_ids=np.asarray(places, dtype=np.int64),
        visits=np.asarray(visits, dtype=np.int64),
        extra={"world_config": cfg.to_dict()},
    )


def _counts(n: int, fractions: Sequence[float]) -> list[int]:
    f = np.asarray(fractions, dtype=float)
    if f.ndim != 1 or np.any(f < 0) or f.sum() <= 0:
        raise ValidationError(f"invalid split fractions {fractions}")
    raw = f / f.sum() * n
    counts = np.floor(raw).astype(int)
    rem = raw - counts
    order = sorted(range(len(f)), key=lambda i: (-round(rem[i], 12), -i))
    for i in order[: n - counts.sum()]:
        counts[i] += 1
    return counts.tolist()


def min_cross_distance(a: np.ndarray, b: np.ndarray) -> float:
    if len(a) == 0 or len(b) == 0:
        return math.inf
    diff = a[:, None, :] - b[None, :, :]
    return float(np.sqrt(np.min(np.sum(diff * diff, axis=-1))))


def split_geographic(
    dataset: DescriptorDataset, fractions: Sequence[float] = (1 / 3, 1 / 3, 1 / 3), names=SPLIT_NAMES,
) -> tuple[DescriptorDataset, ...]:
    """Partition places (never single images) into spatially contiguous splits.

    Places are ordered along x (then y) and cut into consecutive groups sized
    by ``fractions``; the place grid spacing leaves a gutter between groups.
    Raises if two splits come within 25 m of each other or a split with a
    positive fraction gets no places.
    """
    if dataset.place_ids is None:
        raise ValidationError("dataset has no place ids")
    if len(fractions) != len(names):
        raise ValidationError("need one name per fraction")
    place_ids = np.unique(dataset.place_ids)
    centers = np.array([dataset.positions[dataset.place_ids == p].mean(0) for p in place_ids])
    order = np.lexsort((place_ids, centers[:, 1], centers[:, 0]))
    counts = _counts(len(place_ids), fractions)
    out, start = [], 0
    for name, frac, cnt in zip(names, fractions, counts):
        if frac > 0 and cnt == 0:
            raise ValidationError(f"split {name!r} receives zero places")
        chosen = place_ids[order[start : start + cnt]]
        start += cnt
        idx = np.flatnonzero(np.isin(dataset.place_ids, chosen))
        sub = dataset.subset(idx)
        sub.splits = [name] * len(sub)
        out.append(sub)
    for i in range(len(out)):
        for j in range(i + 1, len(out)):
            gap = min_cross_distance(out[i].positions, out[j].positions)
            if gap <= NEGATIVE_RADIUS:
                raise ValidationError(f"splits {names[i]!r} and {names[j]!r} are only {gap:.1f} m apart")
    return tuple(out)


def query_indices(ds: DescriptorDataset) -> np.ndarray:
    """Images from each place's latest visit act as queries."""
    if ds.visits is None:
        return np.arange(len(ds))
    last = ds.visits.max()
    return np.flatnonzero(ds.visits == last)


def database_indices(ds: DescriptorDataset) -> np.ndarray:
    if ds.visits is None:
        return np.arange(len(ds))
    last = ds.visits.max()
    return np.flatnonzero(ds.visits != last)


def pairwise_distances(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    diff = a[:, None, :] - b[None, :, :]
    return np.sqrt(np.sum(diff * diff, axis=-1))


def build_tuples(
    split: DescriptorDataset,
    queries: Sequence[int] | None = None,
    database: Sequence[int] | None = None,
    pos_radius: float = POSITIVE_RADIUS,
    neg_radius: float = NEGATIVE_RADIUS,
    min_days: float = MIN_DAYS_APART,
) -> list[TrainingTuple]:
    """Weak supervision: positives within ``pos_radius`` m, negatives beyond
    ``neg_radius`` m, both at least ``min_days`` from the query's date.

    Images between the radii are ignored. ``queries``/``database`` are index
    lists into ``split`` (default: every image in both roles). Queries without
    positives (or negatives) are dropped with a warning.
    """
    if len(split) == 0:
        raise ValidationError("empty split")
    q_idx = np.arange(len(split)) if queries is None else np.asarray(queries, dtype=np.int64)
    db_idx = np.arange(len(split)) if database is None else np.asarray(database, dtype=np.int64)
    dist = pairwise_distances(split.positions[q_idx], split.positions[db_idx])
    days = np.abs(split.timestamps[q_idx][:, None] - split.timestamps[db_idx][None, :])
    same = q_idx[:, None] == db_idx[None, :]
    far_in_time = (days >= min_days) & ~same
    tuples, dropped = [], 0
    for r, qi in enumerate(q_idx):
        pos = db_idx[(dist[r] <= pos_radius) & far_in_time[r]]
        neg = db_idx[(dist[r] > neg_radius) & far_in_time[r]]
        if len(pos) == 0 or len(neg) == 0:
            dropped += 1
            continue
        tuples.append(TrainingTuple(split.ids[qi], tuple(split.ids[i] for i in pos),
                                    tuple(split.ids[i] for i in neg)))
    if dropped:
        log.warning("dropped %d of %d queries without positives or negatives", dropped, len(q_idx))
    return tuples
