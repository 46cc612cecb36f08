"""Primitive auditory foreground/background estimators.

Six heuristic separation cues, each producing a complementary pair of soft
masks per channel over the time-frequency grid:

    hpss            median filtering along time (steady) vs frequency (transient)
    repet           repeating background found via the beat spectrum
    repet_sim       repeating background found via frame self-similarity
    ft2d (M and R)  periodic structure picked as peaks of the 2-D transform
                    of the magnitude spectrogram, modeled from the peaks (M)
                    or from the residual (R)
    melody_salience harmonic-summation melody localization

All masks are ratios in [0, 1] with foreground + background = 1 per bin.
Ratios are regularized with an epsilon that is *relative* to the mean power
of the channel, so scaling the mixture waveform leaves every mask unchanged;
an all-zero channel degenerates to 0.5/0.5 ties everywhere.
"""
from __future__ import annotations

from dataclasses import dataclass, fields
from enum import Enum

import numpy as np

from . import dsp
from .dsp import Spectrogram
from .errors import InputError


class Algorithm(Enum):
    HPSS = 0
    REPET = 1
    REPET_SIM = 2
    FT2D_M = 3
    FT2D_R = 4
    MELODIA = 5


ALGORITHM_ORDER = tuple(Algorithm)
N_CUES = 2 * len(ALGORITHM_ORDER)


@dataclass(frozen=True)
class PrimitiveConfig:
    """Knobs for the six estimators, recorded into feature-file headers."""

    hpss_kernel_t: int = 17
    hpss_kernel_f: int = 17
    repet_period_div: int = 3      # max candidate period = frames // div
    repet_sim_k_div: int = 10      # neighbors = ceil(frames / div)
    ft2d_peak_factor: float = 2.0
    melodia_f0_min: float = 80.0
    melodia_f0_max: float = 1000.0
    melodia_harmonics: int = 5
    melodia_cents: float = 10.0    # salience grid resolution
    eps: float = 1e-8              # relative to per-channel mean power

    def to_text(self) -> str:
        return "\n".join(f"{f.name} = {getattr(self, f.name)}" for f in fields(self)) + "\n"


@dataclass
class PrimitiveMaskPair:
    """Complementary soft masks [C x T x F] from one estimator."""

    foreground: np.ndarray
    background: np.ndarray
    algorithm: Algorithm

    def __post_init__(self) -> None:
        if self.foreground.shape != self.background.shape:
            raise InputError("foreground/background shapes differ")


@dataclass
class PrimitiveFeatureMap:
    """Stacked cues [C x T x F x 12]: (fg, bg) per algorithm in enum order."""

    cues: np.ndarray

    def __post_init__(self) -> None:
        if self.cues.ndim != 4 or self.cues.shape[-1] != N_CUES:
            raise InputError(f"cue tensor must be [C x T x F x {N_CUES}]")


def _ratio_mask(num_sq: np.ndarray, den_sq: np.ndarray, eps_rel: float) -> np.ndarray:
    """(num + e/2) / (den + e) with e scaled to the data; exact zeros tie at 0.5."""
    scale = float(np.mean(den_sq))
    if scale <= 0.0:
        return np.full(num_sq.shape, 0.5)
    e = eps_rel * scale
    return (num_sq + 0.5 * e) / (den_sq + e)


def _pair(fg: np.ndarray, algorithm: Algorithm) -> PrimitiveMaskPair:
    fg = np.clip(fg, 0.0, 1.0)
    return PrimitiveMaskPair(fg, 1.0 - fg, algorithm)


# ---------------------------------------------------------------------------
# HPSS
# ---------------------------------------------------------------------------


def hpss(spec: Spectrogram, kernel_t: int = 17, kernel_f: int = 17,
         eps: float = 1e-8) -> PrimitiveMaskPair:
    """Median-filter harmonic/percussive split.

    A time-axis median emphasizes steady (harmonic) structure, a
    frequency-axis median emphasizes broadband transients. The percussive
    (transient) cue is the foreground.
    """
    if kernel_t % 2 == 0 or kernel_f % 2 == 0:
        raise InputError("HPSS kernels must be odd")
    mags = spec.magnitudes()
    fg = np.empty_like(mags)
    for c in range(spec.channels):
        v = mags[c]
        harm = dsp.median_filter(v, axis=0, length=kernel_t)
        perc = dsp.median_filter(v, axis=1, length=kernel_f)
        fg[c] = _ratio_mask(perc**2, harm**2 + perc**2, eps)
    return _pair(fg, Algorithm.HPSS)


# ---------------------------------------------------------------------------
# REPET
# ---------------------------------------------------------------------------


def beat_spectrum(energy: np.ndarray) -> np.ndarray:
    """Lag autocorrelation of a per-frame energy series, unbiased by lag count."""
    t = energy.shape[0]
    acorr = np.empty(t)
    for lag in range(t):
        acorr[lag] = np.dot(energy[: t - lag], energy[lag:]) / (t - lag)
    return acorr


def find_period(beats: np.ndarray, lo: int, hi: int) -> int:
    """Smallest lag in [lo, hi] whose beat value is within 1e-9 of the max.

    A strictly periodic signal produces equal autocorrelation peaks at every
    multiple of the period; preferring the smallest near-maximal lag picks
    the fundamental period deterministically.
    """
    if hi < lo:
        raise InputError("empty period search range")
    window = beats[lo : hi + 1]
    top = np.max(window)
    good = np.nonzero(window >= top - 1e-9 * max(abs(top), 1.0))[0]
    return lo + int(good[0])


def _repeating_model(v: np.ndarray, period: int) -> np.ndarray:
    """Elementwise median across period-aligned segments of [T x F] magnitudes."""
    t = v.shape[0]
    model = np.empty_like(v)
    for r in range(period):
        rows = np.arange(r, t, period)
        model[rows] = np.median(v[rows], axis=0)
    return model


def repet(spec: Spectrogram, max_period_frames: int | None = None,
          eps: float = 1e-8) -> PrimitiveMaskPair:
    """Repeating-background separation via the beat spectrum.

    The repeating period is the (smallest near-)argmax of the energy
    autocorrelation over lags [2, max_period]; the background model is the
    per-bin median across period-aligned segments, capped by the mixture.
    """
    t = spec.frames
    if max_period_frames is None:
        max_period_frames = max(2, t // 3)
    if t < 2 * max_period_frames:
        max_period_frames = t // 2
    if max_period_frames < 2:
        raise InputError(f"clip of {t} frames is too short for any repeating period")
    mags = spec.magnitudes()
    fg = np.empty_like(mags)
    for c in range(spec.channels):
        v = mags[c]
        energy = np.sum(v**2, axis=1)
        beats = beat_spectrum(energy)
        period = find_period(beats, 2, max_period_frames)
        model = np.minimum(_repeating_model(v, period), v)
        scale = float(np.mean(v))
        if scale <= 0.0:
            fg[c] = 0.5
            continue
        e = eps * scale
        bg = np.minimum((model + 0.5 * e) / (v + e), 1.0)
        fg[c] = 1.0 - bg
    return _pair(fg, Algorithm.REPET)


# ---------------------------------------------------------------------------
# REPET-SIM
# ---------------------------------------------------------------------------


def repet_sim(spec: Spectrogram, k_neighbors: int | None = None,
              eps: float = 1e-8) -> PrimitiveMaskPair:
    """Similarity-driven repeating background.

    Each frame's background model is the elementwise median of its k most
    cosine-similar *other* frames.
    """
    t = spec.frames
    if k_neighbors is None:
        k_neighbors = -(-t // 10)  # ceil
    if k_neighbors >= t:
        raise InputError(f"k_neighbors {k_neighbors} must be < frame count {t}")
    if k_neighbors < 1:
        raise InputError("k_neighbors must be >= 1")
    mags = spec.magnitudes()
    fg = np.empty_like(mags)
    for c in range(spec.channels):
        v = mags[c]
        sim = dsp.self_similarity(v)
        np.fill_diagonal(sim, -np.inf)  # exclude self
        neighbors = np.argsort(-sim, axis=1, kind="stable")[:, :k_neighbors]
        model = np.median(v[neighbors], axis=1)
        model = np.minimum(model, v)
        scale = float(np.mean(v))
        if scale <= 0.0:
            fg[c] = 0.5
            continue
        e = eps * scale
        bg = np.minimum((model + 0.5 * e) / (v + e), 1.0)
        fg[c] = 1.0 - bg
    return _pair(fg, Algorithm.REPET_SIM)


# ---------------------------------------------------------------------------
# FT2D
# ---------------------------------------------------------------------------


def _box_mean_wrap(a: np.ndarray, radius: int) -> np.ndarray:
    """Mean over a (2r+1)^2 box with periodic wraparound."""
    acc = np.zeros_like(a)
    for di in range(-radius, radius + 1):
        rolled = np.roll(a, di, axis=0)
        for dj in range(-radius, radius + 1):
            acc += np.roll(rolled, dj, axis=1)
    return acc / (2 * radius + 1) ** 2


def _local_maxima_wrap(a: np.ndarray) -> np.ndarray:
    """Cells >= all 8 periodic neighbors."""
    out = np.ones(a.shape, dtype=bool)
    for di in (-1, 0, 1):
        for dj in (-1, 0, 1):
            if di == 0 and dj == 0:
                continue
            out &= a >= np.roll(np.roll(a, di, axis=0), dj, axis=1)
    return out


def ft2d(spec: Spectrogram, variant: str = "M", peak_factor: float = 2.0,
         eps: float = 1e-8) -> PrimitiveMaskPair:
    """Common-fate separation on the 2-D transform of the magnitudes.

    Peaks of |fft2(|X|)| away from the zero-rate column carry temporally
    periodic structure. Variant M keeps only peak cells and rebuilds the
    periodic (background) magnitude; variant R zeroes the peak cells and
    models the foreground from the residual. Either model feeds a
    Wiener-style power-ratio mask against its complement.
    """
    if variant not in ("M", "R"):
        raise InputError(f"ft2d variant must be 'M' or 'R', got {variant!r}")
    mags = spec.magnitudes()
    fg = np.empty_like(mags)
    for c in range(spec.channels):
        v = mags[c]
        spectrum = dsp.fft2(v)
        a = np.abs(spectrum)
        peaks = _local_maxima_wrap(a) & (a > peak_factor * _box_mean_wrap(a, 2))
        peaks[0, :] = False  # zero-rate column is never a peak
        if variant == "M":
            model = np.abs(dsp.ifft2(np.where(peaks, spectrum, 0.0)))
            model = np.minimum(model, v)
            rest = np.maximum(v - model, 0.0)
            bg = _ratio_mask(model**2, model**2 + rest**2, eps)
            fg[c] = 1.0 - np.clip(bg, 0.0, 1.0)
        else:
            model = np.abs(dsp.ifft2(np.where(peaks, 0.0, spectrum)))
            model = np.minimum(model, v)
            rest = np.maximum(v - model, 0.0)
            fg[c] = _ratio_mask(model**2, model**2 + rest**2, eps)
    alg = Algorithm.FT2D_M if variant == "M" else Algorithm.FT2D_R
    return _pair(fg, alg)


# ---------------------------------------------------------------------------
# Melody salience
# ---------------------------------------------------------------------------


def salience_grid(f0_min: float, f0_max: float, cents: float) -> np.ndarray:
    """Log-spaced candidate fundamentals from f0_min to f0_max."""
    if f0_max <= f0_min or f0_min <= 0:
        raise InputError("empty or invalid f0 range")
    n = int(np.floor(1200.0 * np.log2(f0_max / f0_min) / cents)) + 1
    return f0_min * 2.0 ** (cents * np.arange(n) / 1200.0)


def melody_salience(
    spec: Spectrogram,
    f0_min: float = 80.0,
    f0_max: float = 1000.0,
    n_harmonics: int = 5,
    cents: float = 10.0,
) -> PrimitiveMaskPair:
    """Harmonic-summation melody cue.

    Per frame, salience(f0) sums magnitudes at the first n harmonics with
    weights 0.8**(h-1); the melody is the argmax candidate, voiced when its
    salience exceeds a tenth of the frame's total magnitude. Voiced frames
    get Gaussian bumps (sigma = 1 bin) around the melody harmonics as the
    foreground mask; unvoiced frames are all background.
    """
    nyquist = spec.sample_rate / 2.0
    if f0_max > nyquist / n_harmonics:
        raise InputError(
            f"f0 range up to {f0_max} Hz with {n_harmonics} harmonics exceeds Nyquist"
        )
    candidates = salience_grid(f0_min, f0_max, cents)
    bin_hz = spec.sample_rate / spec.window_size
    weights = 0.8 ** np.arange(n_harmonics)
    # [n_candidates x n_harmonics] spectrogram bin of each harmonic
    harmonic_bins = np.round(
        candidates[:, None] * np.arange(1, n_harmonics + 1)[None, :] / bin_hz
    ).astype(int)
    harmonic_bins = np.clip(harmonic_bins, 0, spec.n_bins - 1)
    mags = spec.magnitudes()
    bin_axis = np.arange(spec.n_bins)
    fg = np.zeros_like(mags)
    for c in range(spec.channels):
        v = mags[c]  # [T x F]
        sal = np.einsum("tch,h->tc", v[:, harmonic_bins], weights)  # [T x n_candidates]
        best = np.argmax(sal, axis=1)
        best_sal = sal[np.arange(v.shape[0]), best]
        voiced = best_sal > 0.1 * np.sum(v, axis=1)
        melody_bins = harmonic_bins[best]  # [T x n_harmonics]
        # max over harmonics of exp(-(f - bin_h)^2 / 2), sigma = 1 bin
        dist = bin_axis[None, None, :] - melody_bins[:, :, None]
        bumps = np.exp(-0.5 * dist.astype(np.float64) ** 2)
        fg[c] = np.where(voiced[:, None], np.max(bumps, axis=1), 0.0)
    return _pair(fg, Algorithm.MELODIA)


# ---------------------------------------------------------------------------
# All six, stacked
# ---------------------------------------------------------------------------


def extract_all(spec: Spectrogram, config: PrimitiveConfig | None = None) -> PrimitiveFeatureMap:
    """Run every estimator and stack (fg, bg) pairs in enum order."""
    cfg = config or PrimitiveConfig()
    t = spec.frames
    pairs = [
        hpss(spec, cfg.hpss_kernel_t, cfg.hpss_kernel_f, cfg.eps),
        repet(spec, max(2, t // cfg.repet_period_div), cfg.eps),
        repet_sim(spec, min(t - 1, -(-t // cfg.repet_sim_k_div)), cfg.eps),
        ft2d(spec, "M", cfg.ft2d_peak_factor, cfg.eps),
        ft2d(spec, "R", cfg.ft2d_peak_factor, cfg.eps),
        melody_salience(
            spec, cfg.melodia_f0_min, cfg.melodia_f0_max,
            cfg.melodia_harmonics, cfg.melodia_cents,
        ),
    ]
    cues = np.empty(spec.bins.shape + (N_CUES,), dtype=np.float32)
    for i, pair in enumerate(pairs):
        assert pair.algorithm is ALGORITHM_ORDER[i]
        cues[..., 2 * i] = pair.foreground
        cues[..., 2 * i + 1] = pair.background
    return PrimitiveFeatureMap(cues)
