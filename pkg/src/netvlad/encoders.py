"""Image encoders: descriptor maps in, global representations out."""
from __future__ import annotations

import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np

from .descriptors import l2_normalize_rows, resolve_dtype
from .pooling import NetVladParams, max_pool, netvlad_forward, sum_pool

WORKERS_ENV = "NETVLAD_WORKERS"
CHUNK = 256


def worker_count() -> int:
    try:
        return max(1, int(os.environ.get(WORKERS_ENV, "1")))
    except ValueError:
        return 1


def _chunked(fn, x: np.ndarray, workers: int | None = None) -> np.ndarray:
    chunks = [x[i : i + CHUNK] for i in range(0, len(x), CHUNK)]
    workers = worker_count() if workers is None else workers
    if workers > 1 and len(chunks) > 1:
        with ThreadPoolExecutor(workers) as ex:
            parts = list(ex.map(fn, chunks))
    else:
        parts = [fn(c) for c in chunks]
    # chunks are merged in input order, so results do not depend on scheduling
    return np.concatenate(parts) if parts else np.empty((0,))


@dataclass(frozen=True)
class NetVladEncoder:
    params: NetVladParams
    normalize_input: bool = True

    name = "netvlad"

    @property
    def out_dim(self) -> int:
        return self.params.out_dim

    def prepare(self, maps: np.ndarray) -> np.ndarray:
        x = np.asarray(maps).astype(self.params.dtype, copy=False)
        return l2_normalize_rows(x) if self.normalize_input else x

    def encode(self, maps: np.ndarray, workers: int | None = None) -> np.ndarray:
        """(B, N, D) maps -> (B, K*D) representations."""
        return _chunked(lambda c: netvlad_forward(self.prepare(c), self.params)[0], np.asarray(maps), workers)


@dataclass(frozen=True)
class PoolEncoder:
    """Parameter-free Max or Sum pooling. Max uses raw descriptors by default."""

    method: str = "max"
    normalize_input: bool | None = None
    precision: str = "double"

    @property
    def name(self) -> str:
        return self.method

    def encode(self, maps: np.ndarray, workers: int | None = None) -> np.ndarray:
        pool = {"max": max_pool, "sum": sum_pool}.get(self.method)
        if pool is None:
            raise ValueError(f"unknown pooling method {self.method!r}")
        norm = self.method != "max" if self.normalize_input is None else self.normalize_input
        dtype = resolve_dtype(self.precision)

        def run(c):
            c = c.astype(dtype, copy=False)
            return pool(l2_normalize_rows(c) if norm else c)

        return _chunked(run, np.asarray(maps), workers)
