"""Deterministic signal-processing kernels.

Everything here is built on an in-repo FFT (iterative radix-2 plus a
Bluestein fallback for arbitrary lengths) so that the whole DSP path can be
cross-checked against independent oracles. numpy's FFT is used only in the
test suite, never here.

Conventions:
    - STFT frames are centered: the input is reflection-padded by half a
      window at both ends and frame t is centered at sample t*hop.
    - Frame count is ceil(L / hop); the frame whose center would sit exactly
      at sample L is dropped. With `pad_frames_to` the frame axis is then
      zero-padded (or truncated) on the right to the requested count.
      For a 3 s 44.1 kHz clip at window 2048 / hop 441 this yields 300
      analysis frames, padded to 320.
    - The DC bin is kept and the Nyquist bin dropped, so a spectrogram has
      window/2 frequency bins.
    - iSTFT uses windowed overlap-add normalized by the summed squared
      window, which reconstructs Hann-windowed frames exactly wherever at
      least one frame covers a sample.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .audio import AudioClip
from .errors import InputError

# ---------------------------------------------------------------------------
# FFT kernels
# ---------------------------------------------------------------------------

_BITREV_CACHE: dict[int, np.ndarray] = {}
_TWIDDLE_CACHE: dict[int, np.ndarray] = {}
_CHIRP_CACHE: dict[int, tuple[np.ndarray, np.ndarray, int]] = {}


def _is_pow2(n: int) -> bool:
    return n > 0 and (n & (n - 1)) == 0


def _next_pow2(n: int) -> int:
    m = 1
    while m < n:
        m <<= 1
    return m


def _bitrev_indices(n: int) -> np.ndarray:
    idx = _BITREV_CACHE.get(n)
    if idx is None:
        bits = n.bit_length() - 1
        idx = np.zeros(n, dtype=np.intp)
        for i in range(n):
            r = 0
            x = i
            for _ in range(bits):
                r = (r << 1) | (x & 1)
                x >>= 1
            idx[i] = r
        _BITREV_CACHE[n] = idx
    return idx


def _twiddle(m: int) -> np.ndarray:
    tw = _TWIDDLE_CACHE.get(m)
    if tw is None:
        tw = np.exp(-1j * np.pi * np.arange(m) / m)
        _TWIDDLE_CACHE[m] = tw
    return tw


def _fft_pow2(a: np.ndarray) -> np.ndarray:
    """Iterative radix-2 decimation-in-time FFT along the last axis."""
    n = a.shape[-1]
    y = np.ascontiguousarray(a, dtype=np.complex128)[..., _bitrev_indices(n)]
    m = 1
    while m < n:
        y = y.reshape(y.shape[:-1] + (n // (2 * m), 2, m))
        even = y[..., 0, :]
        odd = y[..., 1, :] * _twiddle(m)
        y = np.concatenate([even + odd, even - odd], axis=-1)
        y = y.reshape(y.shape[:-2] + (n,))
        m *= 2
    return y


def _fft_bluestein(a: np.ndarray) -> np.ndarray:
    """Chirp-z FFT for arbitrary length, expressed as a power-of-two convolution."""
    n = a.shape[-1]
    cached = _CHIRP_CACHE.get(n)
    if cached is None:
        k = np.arange(n)
        chirp = np.exp(-1j * np.pi * (k * k % (2 * n)) / n)
        m = _next_pow2(2 * n - 1)
        kernel = np.zeros(m, dtype=np.complex128)
        kernel[:n] = np.conj(chirp)
        kernel[m - n + 1 :] = np.conj(chirp[1:][::-1])
        cached = (chirp, _fft_pow2(kernel), m)
        _CHIRP_CACHE[n] = cached
    chirp, kernel_f, m = cached
    buf = np.zeros(a.shape[:-1] + (m,), dtype=np.complex128)
    buf[..., :n] = a * chirp
    conv = _ifft_pow2(_fft_pow2(buf) * kernel_f)
    return conv[..., :n] * chirp


def _ifft_pow2(a: np.ndarray) -> np.ndarray:
    return np.conj(_fft_pow2(np.conj(a))) / a.shape[-1]


def fft(a: np.ndarray) -> np.ndarray:
    """DFT along the last axis, any length."""
    a = np.asarray(a)
    n = a.shape[-1]
    if n == 1:
        return a.astype(np.complex128)
    if _is_pow2(n):
        return _fft_pow2(a)
    return _fft_bluestein(np.asarray(a, dtype=np.complex128))


def ifft(a: np.ndarray) -> np.ndarray:
    """Inverse DFT along the last axis."""
    a = np.asarray(a, dtype=np.complex128)
    return np.conj(fft(np.conj(a))) / a.shape[-1]


def fft2(x: np.ndarray) -> np.ndarray:
    """2-D DFT of a [T x F] array (last two axes for higher ranks)."""
    y = fft(np.asarray(x, dtype=np.complex128))
    y = fft(np.swapaxes(y, -1, -2))
    return np.swapaxes(y, -1, -2)


def ifft2(x: np.ndarray) -> np.ndarray:
    """Inverse of fft2; ifft2(fft2(x)) == x to machine precision."""
    y = ifft(np.asarray(x, dtype=np.complex128))
    y = ifft(np.swapaxes(y, -1, -2))
    return np.swapaxes(y, -1, -2)


# ---------------------------------------------------------------------------
# STFT / iSTFT
# ---------------------------------------------------------------------------


@dataclass
class Spectrogram:
    """Complex STFT tensor [channels x frames x bins] plus its geometry."""

    bins: np.ndarray
    frame_hop: int
    window_size: int
    sample_rate: int

    def __post_init__(self) -> None:
        self.bins = np.asarray(self.bins)
        if self.bins.ndim != 3:
            raise InputError("spectrogram must be [channels x frames x bins]")
        if self.bins.shape[2] != self.window_size // 2:
            raise InputError(
                f"bin count {self.bins.shape[2]} != window/2 = {self.window_size // 2}"
            )

    @property
    def channels(self) -> int:
        return self.bins.shape[0]

    @property
    def frames(self) -> int:
        return self.bins.shape[1]

    @property
    def n_bins(self) -> int:
        return self.bins.shape[2]

    def magnitudes(self) -> np.ndarray:
        return np.abs(self.bins)


def hann_window(n: int) -> np.ndarray:
    """Periodic Hann window (COLA-compatible for hop <= n/2)."""
    return 0.5 - 0.5 * np.cos(2.0 * np.pi * np.arange(n) / n)


def num_frames(length: int, hop: int) -> int:
    """Retained centered frames for a signal of `length` samples."""
    return max(1, -(-length // hop))  # ceil


def _reflect_indices(pos: np.ndarray, length: int) -> np.ndarray:
    """Map arbitrary sample positions into [0, length) by reflection."""
    if length == 1:
        return np.zeros_like(pos)
    period = 2 * length - 2
    m = np.mod(pos, period)
    return np.where(m >= length, period - m, m)


def stft(
    clip: AudioClip,
    window: int,
    hop: int,
    pad_frames_to: int | None = None,
) -> Spectrogram:
    """Centered Hann STFT of a clip.

    Returns [C x T x window/2] complex bins: DC kept, Nyquist dropped.
    `pad_frames_to` pads the frame axis with zero frames (or truncates) on
    the right, which is how a 300-frame 3 s clip becomes the 320-frame model
    input.
    """
    if not _is_pow2(window):
        raise InputError(f"window size {window} must be a power of two")
    if hop <= 0 or hop > window:
        raise InputError(f"hop {hop} must be in [1, window]")
    if clip.length < hop:
        raise InputError(f"clip of {clip.length} samples is shorter than one hop ({hop})")
    half = window // 2
    n_frames = num_frames(clip.length, hop)
    win = hann_window(window)
    # Frame t covers original samples [t*hop - half, t*hop + half); sample
    # positions outside [0, L) are filled by reflection (no edge repeat),
    # which stays well defined even when the pad exceeds the signal length.
    pos = np.arange(window)[None, :] + hop * np.arange(n_frames)[:, None] - half
    frames = clip.samples[:, _reflect_indices(pos, clip.length)] * win  # [C, T, window]
    spec_full = fft(frames)
    bins = spec_full[..., :half]
    if pad_frames_to is not None:
        if pad_frames_to <= 0:
            raise InputError("pad_frames_to must be positive")
        if pad_frames_to >= bins.shape[1]:
            pad = pad_frames_to - bins.shape[1]
            bins = np.pad(bins, ((0, 0), (0, pad), (0, 0)))
        else:
            bins = bins[:, :pad_frames_to, :]
    return Spectrogram(bins, frame_hop=hop, window_size=window, sample_rate=clip.sample_rate)


def _rebuild_full_spectrum(half_bins: np.ndarray, window: int) -> np.ndarray:
    """Mirror the half spectrum to a full one with a zero Nyquist bin."""
    shape = half_bins.shape[:-1] + (window,)
    full = np.zeros(shape, dtype=np.complex128)
    full[..., : window // 2] = half_bins
    full[..., window // 2 + 1 :] = np.conj(half_bins[..., 1:][..., ::-1])
    return full


def window_overlap_sq(window: int, hop: int, n_frames: int, total_len: int) -> np.ndarray:
    """Sum of squared Hann windows at each padded-sample position."""
    win_sq = hann_window(window) ** 2
    acc = np.zeros(total_len)
    for t in range(n_frames):
        acc[t * hop : t * hop + window] += win_sq
    return acc


def istft_core(bins: np.ndarray, window: int, hop: int, out_len: int) -> np.ndarray:
    """Overlap-add synthesis of complex half-spectra [... x T x F] -> [... x out_len].

    Only the first ceil(out_len / hop) frames take part, so zero frames
    appended by `pad_frames_to` do not perturb the tail.
    """
    half = window // 2
    n_valid = num_frames(out_len, hop)
    if n_valid > bins.shape[-2]:
        raise InputError(
            f"out_len {out_len} needs {n_valid} frames but spectrogram holds {bins.shape[-2]}"
        )
    total = (n_valid - 1) * hop + window
    if half + out_len > total:
        raise InputError(f"out_len {out_len} longer than the frames can cover")
    full = _rebuild_full_spectrum(bins[..., :n_valid, :], window)
    frames = ifft(full).real * hann_window(window)
    lead = bins.shape[:-2]
    out = np.zeros(lead + (total,))
    for t in range(n_valid):
        out[..., t * hop : t * hop + window] += frames[..., t, :]
    wss = np.maximum(window_overlap_sq(window, hop, n_valid, total), 1e-12)
    out /= wss
    return out[..., half : half + out_len]


def istft_adjoint(g: np.ndarray, window: int, hop: int, n_frames: int) -> np.ndarray:
    """Adjoint of istft_core as a real-linear map of (re, im) half-spectra.

    Input is a gradient over the synthesized signal [... x out_len]; output
    is a complex array [... x n_frames x window/2] whose real/imag parts are
    the gradients of the corresponding spectrum components. Frames beyond
    those istft_core used get zero gradient.
    """
    half = window // 2
    out_len = g.shape[-1]
    n_valid = num_frames(out_len, hop)
    total = (n_valid - 1) * hop + window
    lead = g.shape[:-1]
    gp = np.zeros(lead + (total,))
    gp[..., half : half + out_len] = g
    gp /= np.maximum(window_overlap_sq(window, hop, n_valid, total), 1e-12)
    gf = np.empty(lead + (n_valid, window))
    for t in range(n_valid):
        gf[..., t, :] = gp[..., t * hop : t * hop + window]
    gf *= hann_window(window)
    # adjoint of Re(ifft(.)): pack (d/d_re, d/d_im) as fft(g)/n
    gfull = fft(gf) / window
    grad_half = gfull[..., :half].copy()
    mirror = np.conj(gfull[..., half + 1 :][..., ::-1])
    grad_half[..., 1:] += mirror
    out = np.zeros(lead + (n_frames, half), dtype=np.complex128)
    out[..., :n_valid, :] = grad_half
    return out


def istft(spec: Spectrogram, out_len: int) -> AudioClip:
    """Windowed overlap-add inverse STFT of a Spectrogram."""
    samples = istft_core(spec.bins, spec.window_size, spec.frame_hop, out_len)
    return AudioClip(samples, spec.sample_rate)


# ---------------------------------------------------------------------------
# Sliding median, self-similarity
# ---------------------------------------------------------------------------


def median_filter(x: np.ndarray, axis: int, length: int) -> np.ndarray:
    """Sliding median along one axis of a 2-D array with edge replication."""
    if length % 2 == 0 or length < 1:
        raise InputError(f"median filter length {length} must be odd and >= 1")
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 2:
        raise InputError("median_filter expects a 2-D array")
    if length == 1:
        return x.copy()
    if axis not in (0, 1):
        raise InputError("axis must be 0 or 1")
    half = length // 2
    moved = np.moveaxis(x, axis, -1)
    padded = np.pad(moved, ((0, 0), (half, half)), mode="edge")
    windows = np.lib.stride_tricks.sliding_window_view(padded, length, axis=-1)
    out = np.median(windows, axis=-1)
    return np.moveaxis(out, -1, axis)


def self_similarity(frames: np.ndarray) -> np.ndarray:
    """Cosine-similarity matrix between the rows of a [T x D] array.

    Zero-norm rows get similarity 0 against everything except themselves
    (diagonal forced to 1).
    """
    frames = np.asarray(frames, dtype=np.float64)
    if frames.ndim != 2:
        raise InputError("self_similarity expects a 2-D [frames x features] array")
    norms = np.sqrt(np.sum(frames**2, axis=1))
    safe = np.where(norms > 0, norms, 1.0)
    unit = frames / safe[:, None]
    sim = unit @ unit.T
    zero = norms == 0
    sim[zero, :] = 0.0
    sim[:, zero] = 0.0
    np.fill_diagonal(sim, 1.0)
    return sim
