"""NetVLAD layer (forward/backward/init), hard-assignment VLAD, Max and Sum pooling.

Shapes: a single descriptor map is (N, D); a batch of equally sized maps is
(B, N, D). The residual matrix is stored cluster-major as (K, D), so the
flattened representation holds cluster 0's D values first.
"""
from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .descriptors import DescriptorMap, ValidationError, array_hash, resolve_dtype
from .kmeans import kmeans


class StaleCacheError(RuntimeError):
    """Backward was called with a cache that does not belong to these parameters."""


def _readonly(a: np.ndarray) -> np.ndarray:
    a = np.array(a, copy=True)
    a.setflags(write=False)
    return a


@dataclass(frozen=True, eq=False)
class NetVladParams:
    """Trainable NetVLAD parameters: assignment weights ``w`` (K, D), biases
    ``b`` (K,), anchors ``c`` (K, D). ``alpha`` is only recorded from
    initialization."""

    w: np.ndarray
    b: np.ndarray
    c: np.ndarray
    alpha: float = 1.0

    def __post_init__(self):
        w, b, c = np.asarray(self.w), np.asarray(self.b), np.asarray(self.c)
        dtype = np.result_type(w, b, c)
        if dtype.kind != "f":
            dtype = np.dtype(np.float64)
        if w.ndim != 2 or c.shape != w.shape or b.shape != (w.shape[0],):
            raise ValidationError(
                f"inconsistent NetVLAD shapes: w {w.shape}, b {b.shape}, c {c.shape}"
            )
        if w.shape[0] < 1 or w.shape[1] < 1:
            raise ValidationError("need K >= 1 and D >= 1")
        for name, a in (("w", w), ("b", b), ("c", c)):
            if not np.all(np.isfinite(a)):
                raise ValidationError(f"non-finite values in {name}")
        object.__setattr__(self, "w", _readonly(w.astype(dtype)))
        object.__setattr__(self, "b", _readonly(b.astype(dtype)))
        object.__setattr__(self, "c", _readonly(c.astype(dtype)))
        object.__setattr__(self, "_fingerprint", None)

    @property
    def k(self) -> int:
        return self.w.shape[0]

    @property
    def d(self) -> int:
        return self.w.shape[1]

    @property
    def dtype(self) -> np.dtype:
        return self.w.dtype

    @property
    def out_dim(self) -> int:
        return self.k * self.d

    @property
    def fingerprint(self) -> str:
        if self._fingerprint is None:
            object.__setattr__(self, "_fingerprint", array_hash((self.w, self.b, self.c)))
        return self._fingerprint

    @classmethod
    def from_centers(cls, centers: np.ndarray, alpha: float) -> "NetVladParams":
        """Parameters that make the decoupled assignment equal the distance-based one."""
        c = np.asarray(centers)
        return cls(w=2.0 * alpha * c, b=-alpha * np.sum(c * c, axis=1), c=c, alpha=float(alpha))

    def astype(self, dtype) -> "NetVladParams":
        dt = resolve_dtype(dtype)
        return NetVladParams(self.w.astype(dt), self.b.astype(dt), self.c.astype(dt), self.alpha)

    def replace(self, **arrays) -> "NetVladParams":
        kw = dict(w=self.w, b=self.b, c=self.c, alpha=self.alpha)
        kw.update(arrays)
        return NetVladParams(**kw)

    def as_dict(self) -> dict[str, np.ndarray]:
        return {"w": self.w, "b": self.b, "c": self.c}

    def allclose(self, other: "NetVladParams", **kw) -> bool:
        return all(np.allclose(getattr(self, n), getattr(other, n), **kw) for n in "wbc")

    def equal(self, other: "NetVladParams") -> bool:
        return all(np.array_equal(getattr(self, n), getattr(other, n)) for n in "wbc")


def _as_array(map) -> np.ndarray:
    if isinstance(map, DescriptorMap):
        return map.descriptors
    return np.asarray(map)


def _check_dims(x: np.ndarray, params: NetVladParams):
    if x.ndim not in (2, 3):
        raise ValidationError(f"descriptors must be (N, D) or (B, N, D), got {x.shape}")
    if x.shape[-1] != params.d:
        raise ValidationError(f"descriptor dim {x.shape[-1]} != params dim {params.d}")


def _softmax(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def soft_assign(map, params: NetVladParams) -> np.ndarray:
    """Soft-assignment weights from the linear form softmax_k(w_k.x + b_k).

    Returns (N, K) (or (B, N, K) for a batch); rows sum to one.
    """
    x = _as_array(map)
    _check_dims(x, params)
    x = x.astype(params.dtype, copy=False)
    return _softmax(x @ params.w.T + params.b)


def soft_assign_distance(map, centers: np.ndarray, alpha: float) -> np.ndarray:
    """Soft-assignment weights from squared distances: softmax_k(-alpha |x - c_k|^2)."""
    x = _as_array(map)
    c = np.asarray(centers)
    if x.shape[-1] != c.shape[-1]:
        raise ValidationError(f"descriptor dim {x.shape[-1]} != center dim {c.shape[-1]}")
    diff = x[..., :, None, :] - c
    return _softmax(-alpha * np.sum(diff * diff, axis=-1))


def _safe_div(num: np.ndarray, den: np.ndarray) -> np.ndarray:
    # 0/0 := 0
    return np.where(den > 0, num / np.where(den > 0, den, 1), 0).astype(num.dtype, copy=False)


def normalize_vlad(v: np.ndarray):
    """Intra-normalize each cluster row of ``v`` (..., K, D), flatten, then L2-normalize.

    Returns (output, col_norms, intra, global_norm).
    """
    col_norms = np.sqrt(np.sum(v * v, axis=-1, keepdims=True))
    intra = _safe_div(v, col_norms)
    flat = intra.reshape(*v.shape[:-2], -1)
    gnorm = np.sqrt(np.sum(flat * flat, axis=-1, keepdims=True))
    return _safe_div(flat, gnorm), col_norms, intra, gnorm


@dataclass(frozen=True, eq=False)
class ForwardCache:
    x: np.ndarray
    assign: np.ndarray
    vlad: np.ndarray
    col_norms: np.ndarray
    intra: np.ndarray
    global_norm: np.ndarray
    output: np.ndarray
    params: NetVladParams
    batched: bool


def netvlad_forward(map, params: NetVladParams) -> tuple[np.ndarray, ForwardCache]:
    """NetVLAD representation of one map (N, D) or a batch (B, N, D).

    Output has length K*D (or shape (B, K*D)) and unit norm unless every
    residual column is zero, in which case it is the zero vector.
    """
    x = _as_array(map)
    _check_dims(x, params)
    batched = x.ndim == 3
    xb = (x if batched else x[None]).astype(params.dtype, copy=False)
    a = _softmax(xb @ params.w.T + params.b)  # (B, N, K)
    v = np.einsum("bnk,bnd->bkd", a, xb) - a.sum(axis=1)[:, :, None] * params.c
    out, col_norms, intra, gnorm = normalize_vlad(v)
    cache = ForwardCache(xb, a, v, col_norms, intra, gnorm, out, params, batched)
    return (out if batched else out[0]), cache


@dataclass(frozen=True)
class NetVladGrads:
    w: np.ndarray
    b: np.ndarray
    c: np.ndarray
    x: np.ndarray

    def params(self) -> dict[str, np.ndarray]:
        return {"w": self.w, "b": self.b, "c": self.c}


def netvlad_backward(
    cache: ForwardCache, grad_out: np.ndarray, params: NetVladParams | None = None
) -> NetVladGrads:
    """Gradients of <grad_out, output> w.r.t. w, b, c (summed over a batch) and x.

    Passing ``params`` checks that the cache was produced with exactly those
    parameters.
    """
    if not isinstance(cache, ForwardCache):
        raise StaleCacheError("backward needs the cache returned by netvlad_forward")
    if params is not None and params is not cache.params and params.fingerprint != cache.params.fingerprint:
        raise StaleCacheError("cache was computed with different parameters")
    p = cache.params
    g = np.asarray(grad_out, dtype=p.dtype)
    if not cache.batched:
        g = g[None]
    if g.shape != cache.output.shape:
        raise StaleCacheError(
            f"grad_out shape {np.shape(grad_out)} does not match cached output"
        )
    b, k, d = cache.vlad.shape

    # global L2 normalization
    y = cache.output
    g_flat = _safe_div(g - y * np.sum(y * g, axis=-1, keepdims=True), cache.global_norm)
    # intra-normalization
    g_intra = g_flat.reshape(b, k, d)
    u = cache.intra
    g_v = _safe_div(g_intra - u * np.sum(u * g_intra, axis=-1, keepdims=True), cache.col_norms)

    a, x = cache.assign, cache.x
    a_sum = a.sum(axis=1)  # (B, K)
    grad_c = -np.einsum("bk,bkd->kd", a_sum, g_v)
    # d V_k / d a_ik = x_i - c_k
    g_a = np.einsum("bkd,bnd->bnk", g_v, x) - np.sum(g_v * p.c, axis=-1)[:, None, :]
    grad_x = np.einsum("bnk,bkd->bnd", a, g_v)
    # softmax backward
    g_s = a * (g_a - np.sum(a * g_a, axis=-1, keepdims=True))
    grad_w = np.einsum("bnk,bnd->kd", g_s, x)
    grad_b = g_s.sum(axis=(0, 1))
    grad_x = grad_x + g_s @ p.w
    if not cache.batched:
        grad_x = grad_x[0]
    return NetVladGrads(w=grad_w, b=grad_b, c=grad_c, x=grad_x)


def hard_assign(x: np.ndarray, centers: np.ndarray) -> tuple[np.ndarray, int]:
    """Nearest-center index per descriptor (ties -> lowest index) and the tie count."""
    diff = x[..., :, None, :] - centers
    d2 = np.sum(diff * diff, axis=-1)
    nearest = d2.argmin(axis=-1)
    best = np.take_along_axis(d2, nearest[..., None], axis=-1)
    ties = int(np.sum(np.sum(d2 == best, axis=-1) > 1))
    return nearest, ties


def vlad_hard(map, centers: np.ndarray, stats: dict | None = None) -> np.ndarray:
    """Classical VLAD with hard assignment and the same two-stage normalization.

    Nearest-center ties go to the lowest cluster index; if ``stats`` is given,
    ``stats["ties"]`` is incremented by the number of tied descriptors.
    """
    x = _as_array(map)
    c = np.asarray(centers)
    if x.ndim not in (2, 3) or c.ndim != 2 or x.shape[-1] != c.shape[1]:
        raise ValidationError(f"dimension mismatch: descriptors {x.shape}, centers {c.shape}")
    dtype = np.result_type(x.dtype, c.dtype, np.float32)
    x, c = x.astype(dtype, copy=False), c.astype(dtype, copy=False)
    nearest, ties = hard_assign(x, c)
    if stats is not None:
        stats["ties"] = stats.get("ties", 0) + ties
    onehot = (nearest[..., None] == np.arange(c.shape[0])).astype(dtype)
    v = np.einsum("...nk,...nd->...kd", onehot, x) - onehot.sum(axis=-2)[..., None] * c
    return normalize_vlad(v)[0]


def _l2(v: np.ndarray) -> np.ndarray:
    return _safe_div(v, np.sqrt(np.sum(v * v, axis=-1, keepdims=True)))


def max_pool(map) -> np.ndarray:
    """Per-dimension max over descriptors, then L2 normalization."""
    x = _as_array(map)
    if x.ndim not in (2, 3) or x.shape[-2] < 1:
        raise ValidationError(f"need a non-empty (N, D) map, got {x.shape}")
    return _l2(x.max(axis=-2))


def sum_pool(map) -> np.ndarray:
    """Per-dimension sum over descriptors, then L2 normalization."""
    x = _as_array(map)
    if x.ndim not in (2, 3) or x.shape[-2] < 1:
        raise ValidationError(f"need a non-empty (N, D) map, got {x.shape}")
    return _l2(x.sum(axis=-2))


# ---------------------------------------------------------------------------
# initialization


def assignment_gaps(sample: np.ndarray, centers: np.ndarray) -> np.ndarray:
    """Second-nearest minus nearest squared center distance, per descriptor."""
    diff = sample[:, None, :] - centers[None]
    d2 = np.sort(np.sum(diff * diff, axis=-1), axis=1)
    return d2[:, 1] - d2[:, 0]


def alpha_for_ratio(sample: np.ndarray, centers: np.ndarray, target_ratio: float = 100.0) -> float:
    """alpha such that the geometric mean of (largest / second largest) weight is ``target_ratio``.

    Under distance soft-assignment that ratio is exp(alpha * gap_i) per
    descriptor, so the geometric mean is exp(alpha * mean(gap)).
    """
    if target_ratio <= 1:
        raise ValueError("target_ratio must exceed 1")
    gaps = assignment_gaps(np.asarray(sample, dtype=np.float64), np.asarray(centers, dtype=np.float64))
    mean_gap = float(gaps.mean())
    if not mean_gap > 0:
        raise ValueError(
            "degenerate initialization sample: nearest and second-nearest cluster "
            f"distances coincide for all {len(gaps)} descriptors"
        )
    return float(np.log(target_ratio) / mean_gap)


def assignment_ratio(sample: np.ndarray, params: NetVladParams) -> np.ndarray:
    a = np.sort(soft_assign(np.asarray(sample, dtype=params.dtype), params), axis=-1)
    return a[:, -1] / a[:, -2]


def init_netvlad(
    sample: np.ndarray,
    k: int,
    target_ratio: float = 100.0,
    seed: int | np.random.Generator | None = 0,
    precision: str = "double",
) -> NetVladParams:
    """Anchors from k-means on ``sample``; alpha from the ratio rule; w, b from the
    distance identity (w_k = 2 alpha c_k, b_k = -alpha |c_k|^2)."""
    x = np.asarray(sample, dtype=np.float64)
    if x.ndim != 2:
        raise ValidationError(f"sample must be M x D, got {x.shape}")
    centers = kmeans(x, k, seed=seed)
    alpha = 1.0 if k == 1 else alpha_for_ratio(x, centers, target_ratio)
    return NetVladParams.from_centers(centers, alpha).astype(precision)


# ---------------------------------------------------------------------------
# checkpoint container

PARAMS_MAGIC = b"NVLADCK\0"
PARAMS_VERSION = 1
_HEADER = np.dtype([("magic", "S8"), ("version", "<u4"), ("k", "<u4"), ("d", "<u4"), ("itemsize", "<u4")])


def params_to_bytes(params: NetVladParams) -> bytes:
    header = np.zeros((), dtype=_HEADER)
    header["magic"] = PARAMS_MAGIC
    header["version"] = PARAMS_VERSION
    header["k"] = params.k
    header["d"] = params.d
    header["itemsize"] = params.dtype.itemsize
    le = params.dtype.newbyteorder("<")
    body = b"".join(np.ascontiguousarray(a, dtype=le).tobytes() for a in (params.w, params.b, params.c))
    return header.tobytes() + body


def params_from_bytes(raw: bytes, alpha: float = 1.0) -> NetVladParams:
    if len(raw) < _HEADER.itemsize:
        raise ValidationError("truncated parameter container")
    header = np.frombuffer(raw[: _HEADER.itemsize], dtype=_HEADER)[0]
    if bytes(header["magic"]).ljust(8, b"\0") != PARAMS_MAGIC:
        raise ValidationError("not a NetVLAD parameter container")
    if int(header["version"]) != PARAMS_VERSION:
        raise ValidationError(f"unsupported container version {int(header['version'])}")
    k, d, size = int(header["k"]), int(header["d"]), int(header["itemsize"])
    dt = {4: np.dtype("<f4"), 8: np.dtype("<f8")}.get(size)
    if dt is None:
        raise ValidationError(f"unsupported item size {size}")
    body = raw[_HEADER.itemsize :]
    if len(body) != (2 * k * d + k) * size:
        raise ValidationError("parameter container body has the wrong length")
    flat = np.frombuffer(body, dtype=dt)
    w = flat[: k * d].reshape(k, d)
    b = flat[k * d : k * d + k]
    c = flat[k * d + k :].reshape(k, d)
    return NetVladParams(w, b, c, alpha).astype(np.float32 if size == 4 else np.float64)


def sidecar_path(path: str | Path) -> Path:
    p = Path(path)
    return p.with_name(p.name + ".json")


def save_params(params: NetVladParams, path: str | Path, **meta) -> Path:
    """Write the binary container and a JSON sidecar (alpha plus ``meta``)."""
    p = Path(path)
    p.parent.mkdir(parents=True, exist_ok=True)
    raw = params_to_bytes(params)
    p.write_bytes(raw)
    side = {"alpha": params.alpha, "k": params.k, "d": params.d,
            "precision": "single" if params.dtype == np.float32 else "double",
            "sha256": hashlib.sha256(raw).hexdigest()}
    side.update(meta)
    sidecar_path(p).write_text(json.dumps(side, indent=1, sort_keys=True) + "\n")
    return p


def load_params(path: str | Path) -> NetVladParams:
    p = Path(path)
    if p.suffix == ".npz":
        with np.load(p) as z:
            return NetVladParams(z["w"], z["b"], z["c"], float(z["alpha"]))
    alpha = 1.0
    side = sidecar_path(p)
    if side.is_file():
        alpha = float(json.loads(side.read_text()).get("alpha", 1.0))
    return params_from_bytes(p.read_bytes(), alpha)


def load_params_meta(path: str | Path) -> dict:
    side = sidecar_path(path)
    return json.loads(side.read_text()) if side.is_file() else {}
