"""Dense local-descriptor maps and the on-disk descriptor dataset format."""
from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Iterable, Sequence

import numpy as np

PRECISIONS = {"single": np.float32, "double": np.float64}

MANIFEST_NAME = "manifest.json"
FORMAT_VERSION = 1


class ValidationError(ValueError):
    """Input violates a documented precondition."""


def resolve_dtype(precision: str | np.dtype | type) -> np.dtype:
    if isinstance(precision, str):
        try:
            return np.dtype(PRECISIONS[precision])
        except KeyError:
            raise ValidationError(
                f"unknown precision {precision!r}; expected one of {sorted(PRECISIONS)}"
            ) from None
    dt = np.dtype(precision)
    if dt not in (np.float32, np.float64):
        raise ValidationError(f"unsupported dtype {dt}")
    return dt


@dataclass(frozen=True)
class DescriptorMap:
    """N local D-dimensional descriptors of one image (rows of ``descriptors``)."""

    image_id: Any
    descriptors: np.ndarray

    def __post_init__(self):
        x = np.asarray(self.descriptors)
        if x.ndim != 2:
            raise ValidationError(f"descriptors must be 2-D (N, D), got shape {x.shape}")
        if x.shape[0] < 1 or x.shape[1] < 1:
            raise ValidationError(f"need N >= 1 and D >= 1, got shape {x.shape}")
        if x.dtype.kind != "f":
            x = x.astype(np.float64)
        if not np.all(np.isfinite(x)):
            raise ValidationError(f"descriptor map {self.image_id!r} has non-finite values")
        object.__setattr__(self, "descriptors", x)

    @property
    def n(self) -> int:
        return self.descriptors.shape[0]

    @property
    def d(self) -> int:
        return self.descriptors.shape[1]

    def astype(self, dtype) -> "DescriptorMap":
        return DescriptorMap(self.image_id, self.descriptors.astype(resolve_dtype(dtype)))


def _l2_rows(x: np.ndarray) -> np.ndarray:
    # pre-scale by the row max so tiny rows do not underflow when squared
    peak = np.max(np.abs(x), axis=-1, keepdims=True)
    nonzero = peak > 0
    y = x / np.where(nonzero, peak, 1)
    norms = np.sqrt(np.sum(y * y, axis=-1, keepdims=True))
    # zero rows stay zero
    return np.where(nonzero, y / np.where(nonzero, norms, 1), 0).astype(x.dtype, copy=False)


def l2_normalize_descriptors(map: DescriptorMap) -> DescriptorMap:
    """Normalize every descriptor row to unit Euclidean norm; zero rows are kept."""
    if not np.all(np.isfinite(map.descriptors)):
        raise ValidationError("non-finite descriptor value")
    return DescriptorMap(map.image_id, _l2_rows(map.descriptors))


def l2_normalize_rows(x: np.ndarray) -> np.ndarray:
    """Array version of :func:`l2_normalize_descriptors` (normalizes the last axis)."""
    x = np.asarray(x)
    if not np.all(np.isfinite(x)):
        raise ValidationError("non-finite descriptor value")
    return _l2_rows(x)


def flatten_map(tensor: np.ndarray, image_id: Any = None) -> DescriptorMap:
    """Turn an H x W x D activation tensor into N = H*W descriptor rows (W fastest)."""
    t = np.asarray(tensor)
    if t.ndim != 3 or min(t.shape) < 1:
        raise ValidationError(f"expected a non-empty H x W x D tensor, got shape {t.shape}")
    h, w, d = t.shape
    return DescriptorMap(image_id, t.reshape(h * w, d))


# ---------------------------------------------------------------------------
# dataset directory: manifest.json + one little-endian float32 blob per image


@dataclass
class DescriptorDataset:
    """In-memory view of a descriptor dataset directory.

    ``descriptors`` is a (num_images, N, D) array; per-image metadata lives in
    parallel arrays. ``extra`` carries free-form manifest fields (world
    config, split info, ...).
    """

    ids: list[str]
    descriptors: np.ndarray
    positions: np.ndarray
    timestamps: np.ndarray
    conditions: np.ndarray | None = None
    place_ids: np.ndarray | None = None
    visits: np.ndarray | None = None
    splits: list[str] | None = None
    extra: dict = field(default_factory=dict)

    def __post_init__(self):
        self.descriptors = np.asarray(self.descriptors)
        self.positions = np.asarray(self.positions, dtype=np.float64).reshape(-1, 2)
        self.timestamps = np.asarray(self.timestamps, dtype=np.float64)
        m = len(self.ids)
        if self.descriptors.ndim != 3 or self.descriptors.shape[0] != m:
            raise ValidationError("descriptors must be (num_images, N, D)")
        if self.positions.shape[0] != m or self.timestamps.shape[0] != m:
            raise ValidationError("metadata length does not match image count")
        if len(set(self.ids)) != m:
            raise ValidationError("image ids must be unique")

    def __len__(self) -> int:
        return len(self.ids)

    @property
    def n(self) -> int:
        return self.descriptors.shape[1]

    @property
    def d(self) -> int:
        return self.descriptors.shape[2]

    def map(self, i: int) -> DescriptorMap:
        return DescriptorMap(self.ids[i], self.descriptors[i])

    def subset(self, indices: Sequence[int] | np.ndarray) -> "DescriptorDataset":
        idx = np.asarray(indices, dtype=np.int64)

        def take(a):
            return None if a is None else np.asarray(a)[idx]

        return DescriptorDataset(
            ids=[self.ids[i] for i in idx],
            descriptors=self.descriptors[idx],
            positions=self.positions[idx],
            timestamps=self.timestamps[idx],
            conditions=take(self.conditions),
            place_ids=take(self.place_ids),
            visits=take(self.visits),
            splits=None if self.splits is None else [self.splits[i] for i in idx],
            extra=dict(self.extra),
        )

    def manifest(self) -> dict:
        def lst(a):
            return None if a is None else np.asarray(a).tolist()

        return {
            "format_version": FORMAT_VERSION,
            "n": int(self.n),
            "d": int(self.d),
            "dtype": "<f4",
            "ids": list(self.ids),
            "positions": self.positions.tolist(),
            "timestamps": self.timestamps.tolist(),
            "conditions": lst(self.conditions),
            "place_ids": lst(self.place_ids),
            "visits": lst(self.visits),
            "splits": self.splits,
            "extra": self.extra,
        }


def _blob_name(image_id: str) -> str:
    return f"{image_id}.f32"


def save_dataset(ds: DescriptorDataset, out_dir: str | Path) -> str:
    """Write ``ds`` to ``out_dir`` and return its content hash."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    for image_id in ds.ids:
        if "/" in image_id or image_id.startswith("."):
            raise ValidationError(f"image id {image_id!r} is not a safe file name")
    manifest = json.dumps(ds.manifest(), indent=1, sort_keys=True)
    (out / MANIFEST_NAME).write_text(manifest + "\n")
    blobs = np.ascontiguousarray(ds.descriptors, dtype="<f4")
    for image_id, arr in zip(ds.ids, blobs):
        (out / _blob_name(image_id)).write_bytes(arr.tobytes(order="C"))
    return dataset_hash(out)


def load_dataset(path: str | Path) -> DescriptorDataset:
    root = Path(path)
    mpath = root / MANIFEST_NAME
    if not mpath.is_file():
        raise FileNotFoundError(f"no dataset manifest at {mpath}")
    m = json.loads(mpath.read_text())
    if m.get("format_version") != FORMAT_VERSION:
        raise ValidationError(f"unsupported dataset format version {m.get('format_version')}")
    n, d = int(m["n"]), int(m["d"])
    arr = np.empty((len(m["ids"]), n, d), dtype=np.float32)
    for i, image_id in enumerate(m["ids"]):
        raw = (root / _blob_name(image_id)).read_bytes()
        if len(raw) != n * d * 4:
            raise ValidationError(f"blob for {image_id!r} has {len(raw)} bytes, expected {n * d * 4}")
        arr[i] = np.frombuffer(raw, dtype="<f4").reshape(n, d)

    def opt(key, dtype=None):
        v = m.get(key)
        return None if v is None else np.asarray(v, dtype=dtype)

    return DescriptorDataset(
        ids=list(m["ids"]),
        descriptors=arr,
        positions=np.asarray(m["positions"], dtype=np.float64),
        timestamps=np.asarray(m["timestamps"], dtype=np.float64),
        conditions=opt("conditions", np.int64),
        place_ids=opt("place_ids", np.int64),
        visits=opt("visits", np.int64),
        splits=m.get("splits"),
        extra=m.get("extra") or {},
    )


def dataset_hash(path: str | Path) -> str:
    """SHA-256 over the manifest and every blob, in manifest order."""
    root = Path(path)
    h = hashlib.sha256()
    mbytes = (root / MANIFEST_NAME).read_bytes()
    h.update(mbytes)
    for image_id in json.loads(mbytes)["ids"]:
        h.update((root / _blob_name(image_id)).read_bytes())
    return h.hexdigest()


def array_hash(arrays: Iterable[np.ndarray]) -> str:
    h = hashlib.sha256()
    for a in arrays:
        a = np.ascontiguousarray(a)
        h.update(str(a.dtype.str).encode())
        h.update(str(a.shape).encode())
        h.update(a.tobytes())
    return h.hexdigest()
