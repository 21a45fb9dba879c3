"""Exact Euclidean retrieval, spatial non-maximum suppression and recall@N."""
from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .descriptors import DescriptorDataset, ValidationError
from .geodata import NEGATIVE_RADIUS, database_indices, query_indices
from .postprocess import WhiteningTransform, apply_whitening

DEFAULT_N_VALUES = (1, 2, 3, 4, 5, 10, 15, 20, 25)
DEFAULT_NMS_RADIUS = 10.0


@dataclass
class RecallCurve:
    n_values: list[int]
    recall: list[float]
    n_queries: int

    def at(self, n: int) -> float:
        return self.recall[self.n_values.index(n)]

    def as_dict(self) -> dict:
        return {"n_values": list(self.n_values), "recall": list(self.recall), "n_queries": self.n_queries}


def euclidean_distances(query: np.ndarray, db: np.ndarray) -> np.ndarray:
    diff = np.asarray(db, dtype=np.float64) - np.asarray(query, dtype=np.float64)
    return np.sqrt(np.sum(diff * diff, axis=-1))


def rank_database(query_repr: np.ndarray, db_reprs: np.ndarray, db_ids: Sequence | None = None):
    """Full ascending-distance order (ties by ascending id) and the distances."""
    db = np.asarray(db_reprs)
    if db.ndim != 2 or db.shape[0] == 0:
        raise ValidationError("empty database")
    if db.shape[1] != np.shape(query_repr)[-1]:
        raise ValidationError(f"query dim {np.shape(query_repr)[-1]} != database dim {db.shape[1]}")
    dist = euclidean_distances(query_repr, db)
    keys = np.arange(len(db)) if db_ids is None else np.asarray(db_ids)
    return np.lexsort((keys, dist)), dist


def retrieve(query_repr, db_reprs, top_n: int, db_ids: Sequence | None = None) -> list[tuple]:
    """Top ``top_n`` database items as (id, distance), nearest first."""
    order, dist = rank_database(query_repr, db_reprs, db_ids)
    ids = list(range(len(dist))) if db_ids is None else list(db_ids)
    return [(ids[i], float(dist[i])) for i in order[:top_n]]


def spatial_nms(ranked: Sequence[tuple], positions, radius: float) -> list[tuple]:
    """Greedy scan in rank order keeping an item only if no kept item is
    strictly closer than ``radius`` meters. ``positions`` maps id -> (x, y)."""
    kept, kept_pos = [], []
    for item in ranked:
        pos = np.asarray(positions[item[0]], dtype=float)
        if kept_pos and np.min(np.linalg.norm(np.asarray(kept_pos) - pos, axis=1)) < radius:
            continue
        kept.append(item)
        kept_pos.append(pos)
    return kept


def recall_at_n(
    ranked_lists: Sequence[Sequence], db_positions, query_positions: np.ndarray,
    n_values: Sequence[int] = DEFAULT_N_VALUES, threshold: float = NEGATIVE_RADIUS,
) -> tuple[RecallCurve, list[int | None]]:
    """Fraction of queries with a top-N result within ``threshold`` meters.

    ``ranked_lists[q]`` holds database ids (or (id, distance) pairs) in rank
    order; ``db_positions`` maps id -> (x, y). Also returns the 1-based rank
    of each query's first correct result (None if there is none).
    """
    if not len(n_values):
        raise ValidationError("n_values must not be empty")
    n_values = [int(n) for n in n_values]
    qpos = np.asarray(query_positions, dtype=float).reshape(-1, 2)
    if len(qpos) != len(ranked_lists):
        raise ValidationError("every query needs a ground-truth position")
    first = []
    for lst, p in zip(ranked_lists, qpos):
        rank = None
        for r, item in enumerate(lst):
            item_id = item[0] if isinstance(item, tuple) else item
            if np.linalg.norm(np.asarray(db_positions[item_id], dtype=float) - p) <= threshold:
                rank = r + 1
                break
        first.append(rank)
    nq = len(first)
    recall = [
        (sum(1 for r in first if r is not None and r <= n) / nq) if nq else 0.0 for n in n_values
    ]
    return RecallCurve(n_values, recall, nq), first


@dataclass
class EvalReport:
    curve: RecallCurve
    queries: list[dict] = field(default_factory=list)
    options: dict = field(default_factory=dict)

    def as_dict(self) -> dict:
        return {"recall": self.curve.as_dict(), "options": self.options, "queries": self.queries}

    def write(self, out_dir: str | Path, stem: str = "report") -> tuple[Path, Path]:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        jpath, cpath = out / f"{stem}.json", out / f"{stem}_curve.csv"
        jpath.write_text(json.dumps(self.as_dict(), indent=1, sort_keys=True) + "\n")
        with cpath.open("w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["n", "recall"])
            for n, r in zip(self.curve.n_values, self.curve.recall):
                w.writerow([n, repr(float(r))])
        return jpath, cpath


def encode_split(split: DescriptorDataset, encoder, whitening: WhiteningTransform | None = None) -> np.ndarray:
    reprs = encoder.encode(split.descriptors)
    if whitening is not None:
        reprs = apply_whitening(reprs, whitening)
    return reprs


def evaluate(
    split: DescriptorDataset,
    encoder,
    whitening: WhiteningTransform | None = None,
    nms_radius: float | None = None,
    n_values: Sequence[int] = DEFAULT_N_VALUES,
    queries: Sequence[int] | None = None,
    database: Sequence[int] | None = None,
    report_top: int = 10,
    reprs: np.ndarray | None = None,
) -> EvalReport:
    """Encode the split, rank the database for every query, optionally apply
    spatial NMS, and compute the recall curve.

    Queries default to the latest-visit images, the database to the rest.
    Precomputed ``reprs`` (aligned with ``split``) skip the encoding step.
    """
    q_idx = query_indices(split) if queries is None else np.asarray(queries)
    db_idx = database_indices(split) if database is None else np.asarray(database)
    if len(db_idx) == 0:
        raise ValidationError("empty database")
    if reprs is None:
        reprs = encode_split(split, encoder, whitening)
    db_ids = [split.ids[i] for i in db_idx]
    db_pos = {split.ids[i]: split.positions[i] for i in db_idx}
    db_r = reprs[db_idx]
    depth = max(max(n_values), report_top)

    ranked_lists, rows = [], []
    for qi in q_idx:
        order, dist = rank_database(reprs[qi], db_r, db_ids)
        ranked = [(db_ids[i], float(dist[i])) for i in order]
        if nms_radius:
            ranked = spatial_nms(ranked, db_pos, nms_radius)
        ranked_lists.append(ranked[:depth])
    curve, first = recall_at_n(ranked_lists, db_pos, split.positions[q_idx], n_values)
    for qi, ranked, fr in zip(q_idx, ranked_lists, first):
        top = ranked[:report_top]
        rows.append({
            "id": split.ids[qi],
            "top_ids": [t[0] for t in top],
            "top_distances": [t[1] for t in top],
            "correct": [bool(np.linalg.norm(db_pos[t[0]] - split.positions[qi]) <= NEGATIVE_RADIUS) for t in top],
            "first_correct_rank": fr,
        })
    options = {"encoder": getattr(encoder, "name", type(encoder).__name__) if encoder is not None else None,
               "whitening_dim": None if whitening is None else whitening.out_dim,
               "nms_radius": nms_radius, "n_queries": len(q_idx), "n_database": len(db_idx)}
    return EvalReport(curve, rows, options)
