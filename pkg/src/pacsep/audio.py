"""Audio loading, segmentation, and writing.

Contract:
    - WAV (RIFF) little-endian only, PCM 16-bit or IEEE float32.
    - Samples are float arrays shaped [channels, length], values in [-1, 1]
      (int16 payloads are divided by 32768 on read).
    - Resampling is out of scope: callers that require a specific rate must
      reject mismatches themselves.
    - Clip manifests are UTF-8 text, one clip per line,
      ``path<TAB>start<TAB>len<TAB>split``.
"""
from __future__ import annotations

import os
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy.io import wavfile

from .errors import InputError

INT16_SCALE = 32768.0


@dataclass
class AudioClip:
    """A chunk of audio: samples [C x L] in [-1, 1] plus its sample rate."""

    samples: np.ndarray
    sample_rate: int

    def __post_init__(self) -> None:
        self.samples = np.atleast_2d(np.asarray(self.samples, dtype=np.float64))
        if self.samples.ndim != 2:
            raise InputError("clip samples must be a 2-D [channels x length] array")
        if self.samples.shape[1] == 0:
            raise InputError("clip has zero length")
        if not np.all(np.isfinite(self.samples)):
            raise InputError("clip contains non-finite samples")

    @property
    def channels(self) -> int:
        return self.samples.shape[0]

    @property
    def length(self) -> int:
        return self.samples.shape[1]

    def to_stereo(self) -> "AudioClip":
        """Duplicate a mono clip to two identical channels; stereo passes through."""
        if self.channels == 2:
            return self
        if self.channels == 1:
            return AudioClip(np.vstack([self.samples, self.samples]), self.sample_rate)
        raise InputError(f"unsupported channel count {self.channels}")


@dataclass
class ManifestEntry:
    path: str
    start: int
    length: int
    split: str


def read_wav(path: str | os.PathLike) -> AudioClip:
    """Read a PCM16 or float32 WAV file into an AudioClip.

    int16 payloads are scaled by 1/32768 so that -32768 maps to -1.0.
    Any other sample encoding is rejected.
    """
    path = Path(path)
    if not path.exists():
        raise InputError(f"no such audio file: {path}")
    try:
        rate, data = wavfile.read(str(path))
    except Exception as exc:
        raise InputError(f"unreadable WAV file {path}: {exc}") from exc
    if data.size == 0:
        raise InputError(f"WAV file {path} has an empty payload")
    if data.ndim == 1:
        data = data[:, None]
    if data.dtype == np.int16:
        samples = data.astype(np.float64) / INT16_SCALE
    elif data.dtype == np.float32:
        samples = data.astype(np.float64)
    else:
        raise InputError(
            f"unsupported WAV encoding {data.dtype} in {path}; need int16 or float32"
        )
    return AudioClip(samples.T, int(rate))


def write_wav(clip: AudioClip, path: str | os.PathLike, encoding: str = "float32") -> None:
    """Write a clip as a WAV file (float32 by default, or PCM16).

    float32 round-trips bit-exactly; int16 rounds to the nearest step of
    2^-15 with values clipped to [-1, 1 - 2^-15].
    """
    if not np.all(np.isfinite(clip.samples)):
        raise InputError("refusing to write non-finite samples")
    data = clip.samples.T
    if encoding == "float32":
        payload = data.astype(np.float32)
    elif encoding == "int16":
        scaled = np.round(data * INT16_SCALE)
        payload = np.clip(scaled, -INT16_SCALE, INT16_SCALE - 1).astype(np.int16)
    else:
        raise InputError(f"unsupported encoding {encoding!r}")
    if payload.shape[1] == 1:
        payload = payload[:, 0]
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    wavfile.write(str(tmp), clip.sample_rate, payload)
    os.replace(tmp, path)


def segment(
    clip: AudioClip, clip_len: int, hop: int, pad: bool = False
) -> list[AudioClip]:
    """Cut a clip into fixed-length segments every `hop` samples.

    With `pad`, the trailing partial segment is zero-padded on the right;
    without it, only fully covered segments are returned.
    """
    if hop <= 0:
        raise InputError("segment hop must be positive")
    if clip_len <= 0:
        raise InputError("segment length must be positive")
    if clip_len > clip.length and not pad:
        raise InputError(
            f"clip of {clip.length} samples is shorter than segment length {clip_len}"
        )
    out: list[AudioClip] = []
    start = 0
    while start < clip.length:
        chunk = clip.samples[:, start : start + clip_len]
        if chunk.shape[1] < clip_len:
            if not pad:
                break
            chunk = np.pad(chunk, ((0, 0), (0, clip_len - chunk.shape[1])))
        out.append(AudioClip(chunk, clip.sample_rate))
        if start + clip_len >= clip.length:
            break
        start += hop
    return out


def read_manifest(path: str | os.PathLike) -> list[ManifestEntry]:
    path = Path(path)
    if not path.exists():
        raise InputError(f"no such manifest: {path}")
    entries: list[ManifestEntry] = []
    lengths: set[int] = set()
    for ln, raw in enumerate(path.read_text(encoding="utf-8").splitlines(), start=1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        fields = line.split("\t")
        if len(fields) != 4:
            raise InputError(f"{path}:{ln}: expected 4 tab-separated fields")
        entry = ManifestEntry(fields[0], int(fields[1]), int(fields[2]), fields[3])
        if entry.split not in ("train", "valid", "test"):
            raise InputError(f"{path}:{ln}: unknown split tag {entry.split!r}")
        lengths.add(entry.length)
        entries.append(entry)
    if len(lengths) > 1:
        raise InputError(f"{path}: clip length varies within the manifest: {sorted(lengths)}")
    return entries


def write_manifest(entries: list[ManifestEntry], path: str | os.PathLike) -> None:
    path = Path(path)
    lines = [f"{e.path}\t{e.start}\t{e.length}\t{e.split}" for e in entries]
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_text("\n".join(lines) + "\n", encoding="utf-8")
    os.replace(tmp, path)


def load_entry(entry: ManifestEntry, expect_rate: int | None = None) -> AudioClip:
    """Load the clip window named by a manifest entry (stereo-expanded)."""
    clip = read_wav(entry.path).to_stereo()
    if expect_rate is not None and clip.sample_rate != expect_rate:
        raise InputError(
            f"{entry.path}: sample rate {clip.sample_rate} != configured {expect_rate}"
        )
    if entry.start + entry.length > clip.length:
        raise InputError(
            f"{entry.path}: window [{entry.start}, {entry.start + entry.length}) "
            f"exceeds file length {clip.length}"
        )
    window = clip.samples[:, entry.start : entry.start + entry.length]
    return AudioClip(window, clip.sample_rate)
