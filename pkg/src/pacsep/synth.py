"""Deterministic synthetic corpus: harmonic tones over periodic click loops.

Each track is a stereo mixture of two exactly-known sources:

    tonal       a slowly changing harmonic tone (few notes from a fixed
                scale, 4 harmonics, geometric amplitude rolloff)
    percussive  a periodic train of decaying broadband bursts

The generator writes per-track stem WAVs plus two manifests: fixed-length
training clips cut from the mixtures (`clips.tsv`) and whole songs
(`songs.tsv`), and a ready-to-run toy config file.
"""
from __future__ import annotations

from pathlib import Path

import numpy as np

from .audio import AudioClip, ManifestEntry, write_manifest, write_wav
from .model import ModelConfig, toy_config

NOTE_POOL = (196.0, 220.0, 246.9, 293.7, 329.6, 392.0)
CLICK_PERIODS_S = (0.4, 0.5, 0.6, 0.75)


def _tonal_source(rng: np.random.Generator, n: int, rate: int) -> np.ndarray:
    """Piecewise-constant melody of harmonic tones, [2 x n]."""
    note_len = rate // 2
    t = np.arange(n) / rate
    wave = np.zeros(n)
    pos = 0
    while pos < n:
        f0 = rng.choice(NOTE_POOL)
        seg = slice(pos, min(pos + note_len, n))
        phase = 2.0 * np.pi * f0 * t[seg]
        tone = np.zeros(seg.stop - seg.start)
        for h in range(1, 5):
            tone += 0.8 ** (h - 1) * np.sin(h * phase + 0.3 * h)
        # short fade at note boundaries to avoid clicks in the tonal stem
        fade = min(200, tone.size // 4)
        env = np.ones(tone.size)
        env[:fade] = np.linspace(0.0, 1.0, fade)
        env[-fade:] = np.linspace(1.0, 0.0, fade)
        wave[seg] = 0.22 * tone * env
        pos += note_len
    gains = np.array([1.0, 0.85 + 0.3 * rng.random()])
    return gains[:, None] * wave[None, :]


def _percussive_source(rng: np.random.Generator, n: int, rate: int) -> np.ndarray:
    """Periodic decaying noise bursts, [2 x n]."""
    period = int(rng.choice(CLICK_PERIODS_S) * rate)
    burst_len = max(8, rate // 100)
    envelope = np.exp(-np.arange(burst_len) / (burst_len / 4.0))
    wave = np.zeros((2, n))
    for start in range(period // 4, n - burst_len, period):
        noise = rng.standard_normal((2, burst_len))
        wave[:, start : start + burst_len] += 0.5 * envelope * noise
    return wave


def make_synthetic_corpus(
    out_dir: str | Path,
    seed: int,
    n_tracks: int = 10,
    track_seconds: float = 6.0,
    config: ModelConfig | None = None,
) -> dict:
    """Generate tracks, stems, manifests, and a toy config under out_dir."""
    cfg = config or toy_config()
    out = Path(out_dir)
    (out / "tracks").mkdir(parents=True, exist_ok=True)
    rate = cfg.sample_rate
    n = int(round(track_seconds * rate))
    clip_entries: list[ManifestEntry] = []
    song_entries: list[ManifestEntry] = []
    n_valid = max(1, n_tracks // 8)
    n_test = max(1, n_tracks // 8)
    for i in range(n_tracks):
        rng = np.random.default_rng([seed, i])
        tonal = _tonal_source(rng, n, rate)
        percussive = _percussive_source(rng, n, rate)
        mixture = tonal + percussive
        peak = np.max(np.abs(mixture))
        if peak > 0.95:  # common rescale keeps mixture == sum of stems
            scale = 0.95 / peak
            tonal, percussive, mixture = tonal * scale, percussive * scale, mixture * scale
        track_dir = out / "tracks" / f"track{i:02d}"
        track_dir.mkdir(exist_ok=True)
        write_wav(AudioClip(mixture, rate), track_dir / "mixture.wav")
        write_wav(AudioClip(tonal, rate), track_dir / "tonal.wav")
        write_wav(AudioClip(percussive, rate), track_dir / "percussive.wav")
        if i >= n_tracks - n_test:
            split = "test"
        elif i >= n_tracks - n_test - n_valid:
            split = "valid"
        else:
            split = "train"
        mix_path = str(track_dir / "mixture.wav")
        song_entries.append(ManifestEntry(mix_path, 0, n, split))
        if split != "test":
            for start in range(0, n - cfg.clip_samples + 1, cfg.clip_samples):
                clip_entries.append(
                    ManifestEntry(mix_path, start, cfg.clip_samples, split)
                )
    write_manifest(clip_entries, out / "clips.tsv")
    write_manifest(song_entries, out / "songs.tsv")
    config_text = cfg.to_text() + _toy_stage_text()
    (out / "config.cfg").write_text(config_text, encoding="utf-8")
    return {
        "tracks": n_tracks,
        "clips": len(clip_entries),
        "songs": len(song_entries),
        "config": str(out / "config.cfg"),
    }


def _toy_stage_text() -> str:
    return (
        "\n# stage parameters (toy profile)\n"
        "pretrain.steps = 500\n"
        "pretrain.batch_size = 4\n"
        "pretrain.base_lr = 1e-3\n"
        "pretrain.warmup_steps = 50\n"
        "pretrain.drop_step = 150000\n"
        "pretrain.weight_decay = 0.01\n"
        "pretrain.grad_clip = 5.0\n"
        "pretrain.val_every = 250\n"
        "finetune.steps = 1600\n"
        "finetune.batch_size = 2\n"
        "finetune.base_lr = 2e-3\n"
        "finetune.warmup_steps = 100\n"
        "finetune.decay_every = 15000\n"
        "finetune.alpha = 0.9\n"
        "finetune.weight_decay = 0.0\n"
        "finetune.grad_clip = 5.0\n"
        "finetune.val_every = 400\n"
        "kmeans.k = 32\n"
        "kmeans.max_iters = 100\n"
        "kmeans.tol = 1e-6\n"
    )
