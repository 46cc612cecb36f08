"""Binary artifact formats: features (PACF), labels (PACL), K-means (PACK).

All formats are little-endian with a 4-byte magic. Writers go through a
temp-file-plus-rename so an interrupted run never leaves a file with a valid
magic; readers validate sizes and raise InputError on truncation.
"""
from __future__ import annotations

import hashlib
import os
import struct
from pathlib import Path

import numpy as np

from .errors import InputError
from .kmeans import KMeansModel

FEATURE_MAGIC = b"PACF"
LABEL_MAGIC = b"PACL"
KMEANS_MAGIC = b"PACK"
FEATURE_VERSION = 1


def fingerprint(text: str) -> int:
    """First 8 bytes of sha256 over a canonical text serialization, as u64."""
    digest = hashlib.sha256(text.encode("utf-8")).digest()
    return struct.unpack("<Q", digest[:8])[0]


def atomic_write(path: str | os.PathLike, payload: bytes) -> None:
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(payload)
    os.replace(tmp, path)


def _read_exact(buf: bytes, offset: int, size: int, path: Path) -> bytes:
    if offset + size > len(buf):
        raise InputError(f"corrupt artifact {path}: truncated")
    return buf[offset : offset + size]


# ---------------------------------------------------------------------------
# PACF: per-clip patch features
# ---------------------------------------------------------------------------


def write_features(
    path: str | os.PathLike,
    features: np.ndarray,
    channels: int,
    frames: int,
    bins: int,
    patch_t: int,
    patch_f: int,
    config_fingerprint: int,
) -> None:
    features = np.ascontiguousarray(features, dtype=np.float32)
    n_patches = (frames // patch_t) * (bins // patch_f)
    if features.shape[0] != n_patches:
        raise InputError(
            f"{features.shape[0]} feature rows but geometry implies {n_patches}"
        )
    header = FEATURE_MAGIC + struct.pack(
        "<HQ6I",
        FEATURE_VERSION,
        config_fingerprint,
        channels,
        frames,
        bins,
        patch_t,
        patch_f,
        features.shape[1],
    )
    atomic_write(path, header + features.tobytes())


def read_features(path: str | os.PathLike) -> dict:
    path = Path(path)
    if not path.exists():
        raise InputError(f"no such feature file: {path}")
    buf = path.read_bytes()
    if _read_exact(buf, 0, 4, path) != FEATURE_MAGIC:
        raise InputError(f"{path}: bad magic, not a PACF file")
    version, fp = struct.unpack("<HQ", _read_exact(buf, 4, 10, path))
    if version != FEATURE_VERSION:
        raise InputError(f"{path}: unsupported PACF version {version}")
    channels, frames, bins, patch_t, patch_f, dim = struct.unpack(
        "<6I", _read_exact(buf, 14, 24, path)
    )
    n_patches = (frames // patch_t) * (bins // patch_f)
    data = _read_exact(buf, 38, n_patches * dim * 4, path)
    features = np.frombuffer(data, dtype="<f4").reshape(n_patches, dim)
    return {
        "features": features.astype(np.float64),
        "channels": channels,
        "frames": frames,
        "bins": bins,
        "patch_t": patch_t,
        "patch_f": patch_f,
        "config_fingerprint": fp,
    }


# ---------------------------------------------------------------------------
# PACL: per-clip label grid
# ---------------------------------------------------------------------------


def write_labels(path: str | os.PathLike, labels: np.ndarray, n_classes: int) -> None:
    labels = np.asarray(labels)
    if labels.ndim != 2:
        raise InputError("label grid must be 2-D")
    if n_classes > 0xFFFF:
        raise InputError("PACL stores u16 labels; n_classes too large")
    header = LABEL_MAGIC + struct.pack(
        "<3I", n_classes, labels.shape[0], labels.shape[1]
    )
    atomic_write(path, header + labels.astype("<u2").tobytes())


def read_labels(path: str | os.PathLike) -> tuple[np.ndarray, int]:
    path = Path(path)
    if not path.exists():
        raise InputError(f"no such label file: {path}")
    buf = path.read_bytes()
    if _read_exact(buf, 0, 4, path) != LABEL_MAGIC:
        raise InputError(f"{path}: bad magic, not a PACL file")
    n_classes, grid_t, grid_f = struct.unpack("<3I", _read_exact(buf, 4, 12, path))
    data = _read_exact(buf, 16, grid_t * grid_f * 2, path)
    labels = np.frombuffer(data, dtype="<u2").reshape(grid_t, grid_f).astype(np.intp)
    if labels.size and labels.max() >= n_classes:
        raise InputError(f"{path}: label exceeds class count {n_classes}")
    return labels, n_classes


# ---------------------------------------------------------------------------
# PACK: K-means model
# ---------------------------------------------------------------------------


def write_kmeans(path: str | os.PathLike, model: KMeansModel) -> None:
    k, d = model.centroids.shape
    header = KMEANS_MAGIC + struct.pack("<2Iq", k, d, model.seed)
    body = (
        model.feature_mean.astype("<f4").tobytes()
        + model.feature_std.astype("<f4").tobytes()
        + np.ascontiguousarray(model.centroids, dtype="<f4").tobytes()
    )
    atomic_write(path, header + body)


def read_kmeans(path: str | os.PathLike) -> KMeansModel:
    path = Path(path)
    if not path.exists():
        raise InputError(f"no such K-means file: {path}")
    buf = path.read_bytes()
    if _read_exact(buf, 0, 4, path) != KMEANS_MAGIC:
        raise InputError(f"{path}: bad magic, not a PACK file")
    k, d, seed = struct.unpack("<2Iq", _read_exact(buf, 4, 16, path))
    off = 20
    mean = np.frombuffer(_read_exact(buf, off, d * 4, path), dtype="<f4").astype(np.float64)
    off += d * 4
    std = np.frombuffer(_read_exact(buf, off, d * 4, path), dtype="<f4").astype(np.float64)
    off += d * 4
    cents = np.frombuffer(_read_exact(buf, off, k * d * 4, path), dtype="<f4")
    centroids = cents.reshape(k, d).astype(np.float64)
    if np.any(std <= 0):
        raise InputError(f"{path}: non-positive feature std")
    return KMeansModel(centroids=centroids, feature_mean=mean, feature_std=std, seed=seed)


def magic_of(path: str | os.PathLike) -> bytes:
    path = Path(path)
    if not path.exists():
        raise InputError(f"no such file: {path}")
    with open(path, "rb") as fh:
        return fh.read(4)
