"""PCA whitening with dimensionality reduction, followed by L2 normalization."""
from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .descriptors import ValidationError
from .pooling import sidecar_path

EPS = 1e-9


@dataclass(frozen=True, eq=False)
class WhiteningTransform:
    mean: np.ndarray          # (L,)
    rows: np.ndarray          # (D', L): eigenvectors scaled by 1/sqrt(eigenvalue + eps)
    eigenvalues: np.ndarray   # (D',), descending
    eps: float = EPS

    @property
    def in_dim(self) -> int:
        return self.mean.shape[0]

    @property
    def out_dim(self) -> int:
        return self.rows.shape[0]

    def project(self, x: np.ndarray) -> np.ndarray:
        """Whitened projection without the final normalization."""
        return (np.asarray(x) - self.mean) @ self.rows.T


def _fix_signs(vt: np.ndarray) -> np.ndarray:
    idx = np.argmax(np.abs(vt), axis=1)
    signs = np.sign(vt[np.arange(len(vt)), idx])
    signs[signs == 0] = 1
    return vt * signs[:, None]


def fit_whitening(train_reprs: np.ndarray, out_dim: int, eps: float = EPS) -> WhiteningTransform:
    """PCA on ``train_reprs`` (M x L) keeping ``out_dim`` components, each scaled
    to unit variance. Covariance uses the 1/(M-1) normalization."""
    x = np.asarray(train_reprs, dtype=np.float64)
    if x.ndim != 2 or x.shape[0] < 2:
        raise ValidationError(f"need at least 2 training vectors, got shape {x.shape}")
    if out_dim < 1:
        raise ValidationError("out_dim must be >= 1")
    m = x.shape[0]
    mean = x.mean(axis=0)
    xc = x - mean
    # right singular vectors of the centered data are the covariance eigenvectors
    _, s, vt = np.linalg.svd(xc, full_matrices=False)
    eig = s**2 / (m - 1)
    tol = eig[0] * max(x.shape) * np.finfo(np.float64).eps if eig.size else 0.0
    rank = int(np.sum(eig > tol))
    if out_dim > rank:
        raise ValidationError(
            f"out_dim={out_dim} exceeds the attainable rank {rank} "
            f"(min(L={x.shape[1]}, M-1={m - 1}) bounded by the data)"
        )
    vt = _fix_signs(vt[:out_dim])
    eig = eig[:out_dim]
    rows = vt / np.sqrt(eig + eps)[:, None]
    return WhiteningTransform(mean=mean, rows=rows, eigenvalues=eig, eps=eps)


def apply_whitening(repr: np.ndarray, t: WhiteningTransform) -> np.ndarray:
    """Project (one vector or a batch of rows) and L2-normalize; zero stays zero."""
    x = np.asarray(repr, dtype=np.float64)
    if x.shape[-1] != t.in_dim:
        raise ValidationError(f"input dim {x.shape[-1]} != transform input dim {t.in_dim}")
    y = t.project(x)
    norm = np.sqrt(np.sum(y * y, axis=-1, keepdims=True))
    return np.where(norm > 0, y / np.where(norm > 0, norm, 1), 0.0)


WHITEN_MAGIC = b"NVWHTN\0\0"
WHITEN_VERSION = 1
_HEADER = np.dtype([("magic", "S8"), ("version", "<u4"), ("in_dim", "<u4"), ("out_dim", "<u4"), ("itemsize", "<u4")])


def save_whitening(t: WhiteningTransform, path: str | Path, source_hash: str | None = None) -> Path:
    p = Path(path)
    p.parent.mkdir(parents=True, exist_ok=True)
    header = np.zeros((), dtype=_HEADER)
    header["magic"] = WHITEN_MAGIC
    header["version"] = WHITEN_VERSION
    header["in_dim"] = t.in_dim
    header["out_dim"] = t.out_dim
    header["itemsize"] = 8
    raw = header.tobytes() + b"".join(
        np.ascontiguousarray(a, dtype="<f8").tobytes() for a in (t.mean, t.rows, t.eigenvalues)
    )
    p.write_bytes(raw)
    side = {"eps": t.eps, "source_hash": source_hash, "in_dim": t.in_dim, "out_dim": t.out_dim,
            "sha256": hashlib.sha256(raw).hexdigest()}
    sidecar_path(p).write_text(json.dumps(side, indent=1, sort_keys=True) + "\n")
    return p


def load_whitening(path: str | Path) -> WhiteningTransform:
    p = Path(path)
    raw = p.read_bytes()
    header = np.frombuffer(raw[: _HEADER.itemsize], dtype=_HEADER)[0]
    if bytes(header["magic"]).ljust(8, b"\0") != WHITEN_MAGIC or int(header["version"]) != WHITEN_VERSION:
        raise ValidationError(f"{p} is not a whitening transform container")
    L, dp = int(header["in_dim"]), int(header["out_dim"])
    body = np.frombuffer(raw[_HEADER.itemsize :], dtype="<f8")
    if body.size != L + dp * L + dp:
        raise ValidationError("whitening container body has the wrong length")
    eps = EPS
    side = sidecar_path(p)
    if side.is_file():
        eps = float(json.loads(side.read_text()).get("eps", EPS))
    return WhiteningTransform(
        mean=body[:L].copy(), rows=body[L : L + dp * L].reshape(dp, L).copy(),
        eigenvalues=body[L + dp * L :].copy(), eps=eps,
    )
