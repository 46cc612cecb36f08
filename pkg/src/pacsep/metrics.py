"""Separation and pretraining metrics.

The separation metric is a framewise energy-ratio SDR over non-overlapping
frames (1 second by default), pooled over channels, capped at +100 dB, with
silent-reference frames excluded. Medians follow the SiSEC convention:
median over frames per track, then median over tracks.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .audio import AudioClip
from .errors import InputError

SILENCE_ENERGY = 1e-12
SDR_CAP_DB = 100.0


@dataclass
class SdrReport:
    source: str
    frame_sdr: np.ndarray   # dB per retained frame
    frame_len: int

    @property
    def median_db(self) -> float | None:
        if self.frame_sdr.size == 0:
            return None  # no voiced frames
        return float(np.median(self.frame_sdr))

    @property
    def n_frames(self) -> int:
        return int(self.frame_sdr.size)


def framewise_sdr(
    reference: AudioClip,
    estimate: AudioClip,
    frame_len: int,
    source: str = "source",
) -> SdrReport:
    """Per-frame 10*log10(signal/error) energy ratio, channels pooled."""
    if reference.length != estimate.length or reference.channels != estimate.channels:
        raise InputError(
            f"reference [{reference.channels} x {reference.length}] vs "
            f"estimate [{estimate.channels} x {estimate.length}]"
        )
    if frame_len <= 0:
        raise InputError("frame_len must be positive")
    n = reference.length // frame_len
    if n == 0:
        n, frame_len = 1, reference.length
    values = []
    for i in range(n):
        ref = reference.samples[:, i * frame_len : (i + 1) * frame_len]
        est = estimate.samples[:, i * frame_len : (i + 1) * frame_len]
        sig = float(np.sum(ref**2))
        if sig < SILENCE_ENERGY:
            continue
        err = float(np.sum((ref - est) ** 2))
        if err == 0.0:
            values.append(SDR_CAP_DB)
        else:
            values.append(min(10.0 * np.log10(sig / err), SDR_CAP_DB))
    return SdrReport(source=source, frame_sdr=np.asarray(values), frame_len=frame_len)


def median_over_tracks(reports: list[SdrReport]) -> float | None:
    """Median of per-track medians (even counts average the central pair)."""
    if not reports:
        raise InputError("no reports to aggregate")
    medians = [r.median_db for r in reports if r.median_db is not None]
    if not medians:
        return None
    return float(np.median(medians))


def masked_accuracy(logits: np.ndarray, labels: np.ndarray, mask: np.ndarray) -> float:
    """Argmax match rate over masked positions; ties go to the lowest class."""
    mask = np.asarray(mask, dtype=bool)
    if not mask.any():
        raise InputError("empty mask")
    flat_logits = np.asarray(logits).reshape(-1, logits.shape[-1])[mask.reshape(-1)]
    flat_labels = np.asarray(labels).reshape(-1)[mask.reshape(-1)]
    return float(np.mean(np.argmax(flat_logits, axis=-1) == flat_labels))
