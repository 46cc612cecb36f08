"""Patch feature aggregation and pseudo-label creation.

Primitive cues are averaged over non-overlapping time-frequency patches,
split into low/high frequency sub-patches, and concatenated across channels
into one feature vector per patch (dim = 2 sub-patches x 12 cues x channels,
so 48 for stereo). Patches are emitted time-major: the same flattening order
the bottleneck uses for its token sequence, so label grids and token grids
line up index for index.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .dsp import Spectrogram
from .errors import InputError
from .kmeans import KMeansModel, kmeans_assign
from .primitives import N_CUES, PrimitiveConfig, PrimitiveFeatureMap, extract_all


@dataclass
class PatchFeature:
    vec: np.ndarray
    patch_coord: tuple[int, int]  # (patch_t, patch_f)


@dataclass
class PatchLabelSequence:
    """Cluster index per patch, shaped like the encoder token grid."""

    labels: np.ndarray  # [T/P_t x F/P_f] integers
    n_classes: int

    def __post_init__(self) -> None:
        self.labels = np.asarray(self.labels)
        if self.labels.ndim != 2:
            raise InputError("label grid must be 2-D")
        if self.labels.size and (
            self.labels.min() < 0 or self.labels.max() >= self.n_classes
        ):
            raise InputError("label outside [0, n_classes)")

    def flat(self) -> np.ndarray:
        return self.labels.reshape(-1)


def patchify(cues: PrimitiveFeatureMap, patch_t: int, patch_f: int) -> list[PatchFeature]:
    """Average cues over each patch's low/high sub-patches, time-major order."""
    c, t, f, n_cues = cues.cues.shape
    if t % patch_t != 0 or f % patch_f != 0:
        raise InputError(
            f"grid [{t} x {f}] not divisible by patch [{patch_t} x {patch_f}]"
        )
    if patch_f % 2 != 0:
        raise InputError("patch_f must be even (low/high sub-patch split)")
    grid_t, grid_f = t // patch_t, f // patch_f
    half = patch_f // 2
    # [C, grid_t, patch_t, grid_f, patch_f, cues]
    blocks = cues.cues.reshape(c, grid_t, patch_t, grid_f, patch_f, n_cues)
    low = blocks[:, :, :, :, :half, :].mean(axis=(2, 4))   # [C, grid_t, grid_f, cues]
    high = blocks[:, :, :, :, half:, :].mean(axis=(2, 4))
    # per channel: low || high, then channels concatenated
    per_channel = np.concatenate([low, high], axis=-1)      # [C, gt, gf, 2*cues]
    stacked = np.concatenate(list(per_channel), axis=-1)    # [gt, gf, 2*cues*C]
    out: list[PatchFeature] = []
    for ti in range(grid_t):
        for fi in range(grid_f):
            out.append(PatchFeature(stacked[ti, fi].astype(np.float64), (ti, fi)))
    return out


def feature_matrix(features: list[PatchFeature]) -> np.ndarray:
    return np.stack([p.vec for p in features])


def feature_dim(channels: int) -> int:
    return 2 * N_CUES * channels


def label_clip(
    spec: Spectrogram,
    model: KMeansModel,
    patch_t: int,
    patch_f: int,
    config: PrimitiveConfig | None = None,
) -> PatchLabelSequence:
    """Full label path: primitive cues -> patch features -> cluster indices."""
    cues = extract_all(spec, config)
    feats = feature_matrix(patchify(cues, patch_t, patch_f))
    labels = kmeans_assign(model, feats)
    grid_t = spec.frames // patch_t
    grid_f = spec.n_bins // patch_f
    return PatchLabelSequence(labels.reshape(grid_t, grid_f), model.n_clusters)
