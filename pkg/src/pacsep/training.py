"""Stage drivers: masked-prediction pretraining, separation fine-tuning,
latent relabeling, and split utilities.

All stochastic choices (epoch shuffles, mask plans, crop offsets) are derived
from (seed, step, item) tuples rather than sequential RNG state, so resuming
from a checkpoint replays the exact trajectory of an uninterrupted run.
Datasets are cached in memory as spectrograms/waveforms, which is the
intended desk scale; corpus-scale streaming is out of scope.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import artifacts
from .audio import AudioClip, ManifestEntry, load_entry, read_manifest, read_wav
from .autodiff import no_grad
from .checkpoint import load_checkpoint, make_optimizer, save_checkpoint
from .dsp import istft_core, stft
from .errors import ConfigError, InputError, NumericalError
from .kmeans import KMeansModel, kmeans_assign, relabel_from_latents
from .model import MaskPlan, ModelConfig, SeparationModel, make_mask_plan
from .optim import AdamW, LrSchedule, clip_global_norm, lr_at


def clip_key(path: str, start: int) -> str:
    """Stable artifact stem for a manifest entry: parent__file__start."""
    p = Path(path)
    return f"{p.parent.name}__{p.stem}__{start}"


@dataclass
class StageConfig:
    stage: str                     # labels | pretrain | finetune | relabel
    manifest: str
    out_dir: str
    seed: int
    steps: int = 1000
    batch_size: int = 4
    base_lr: float = 5e-4
    warmup_steps: int = 0
    drop_step: int = 150000
    drop_factor: float = 0.1
    decay_every: int = 15000
    alpha: float = 0.9
    weight_decay: float = 0.0
    grad_clip: float = 5.0
    val_every: int = 1000
    early_stop_patience: int = 10
    labels_dir: str | None = None
    init_checkpoint: str | None = None
    resume_from: str | None = None
    data_ratio: float = 1.0
    relabel_layer: int = 6
    augment_channel_swap: bool = False
    augment_gain_db: float = 0.0

    def validate(self) -> "StageConfig":
        if self.stage not in ("labels", "pretrain", "finetune", "relabel"):
            raise ConfigError(f"unknown stage {self.stage!r}")
        if self.steps <= 0:
            raise ConfigError("steps must be > 0")
        if self.batch_size <= 0:
            raise ConfigError("batch_size must be > 0")
        if not Path(self.manifest).exists():
            raise InputError(f"manifest not found: {self.manifest}")
        for attr in ("labels_dir", "init_checkpoint", "resume_from"):
            value = getattr(self, attr)
            if value is not None and not Path(value).exists():
                raise InputError(f"{attr} not found: {value}")
        if not (0.0 < self.data_ratio <= 1.0):
            raise ConfigError("data_ratio must be in (0, 1]")
        return self


@dataclass
class TrainLog:
    records: list[dict] = field(default_factory=list)
    validations: list[dict] = field(default_factory=list)

    def add(self, step: int, **metrics) -> None:
        if self.records and step <= self.records[-1]["step"]:
            raise ConfigError("train log steps must be strictly increasing")
        self.records.append({"step": step, **metrics})

    def add_validation(self, step: int, **metrics) -> None:
        self.validations.append({"step": step, **metrics})

    def to_jsonl(self) -> str:
        lines = [json.dumps({"kind": "step", **r}, sort_keys=True) for r in self.records]
        lines += [json.dumps({"kind": "valid", **r}, sort_keys=True) for r in self.validations]
        return "\n".join(lines) + "\n"

    def write(self, path: str | Path) -> None:
        Path(path).write_text(self.to_jsonl(), encoding="utf-8")


def _epoch_batch(step: int, n_items: int, batch: int, seed: int) -> np.ndarray:
    """Deterministic batch for a global step: seeded shuffle per epoch,
    incomplete trailing batch dropped."""
    per_epoch = n_items // batch
    if per_epoch == 0:
        raise ConfigError(f"batch size {batch} exceeds dataset size {n_items}")
    epoch, pos = divmod(step, per_epoch)
    order = np.random.default_rng([seed, 101, epoch]).permutation(n_items)
    return order[pos * batch : (pos + 1) * batch]


# ---------------------------------------------------------------------------
# pretraining
# ---------------------------------------------------------------------------


@dataclass
class _PretrainItem:
    mags: np.ndarray      # [C x T x F] float32
    labels: np.ndarray    # flat [n_tokens]


def _load_pretrain_items(
    entries: list[ManifestEntry], labels_dir: str, cfg: ModelConfig
) -> list[_PretrainItem]:
    items = []
    for e in entries:
        clip = load_entry(e, expect_rate=cfg.sample_rate)
        spec = stft(clip, cfg.window, cfg.hop, pad_frames_to=cfg.frames)
        labels, k = artifacts.read_labels(Path(labels_dir) / f"{clip_key(e.path, e.start)}.pacl")
        if k != cfg.n_classes:
            raise InputError(f"label file has {k} classes but model expects {cfg.n_classes}")
        if labels.shape != (cfg.grid_t, cfg.grid_f):
            raise InputError(
                f"label grid {labels.shape} != token grid ({cfg.grid_t}, {cfg.grid_f})"
            )
        items.append(_PretrainItem(np.abs(spec.bins).astype(np.float32), labels.reshape(-1)))
    return items


def _validation_accuracy(
    model: SeparationModel, items: list[_PretrainItem], seed: int
) -> float | None:
    if not items:
        return None
    cfg = model.config
    model.eval()
    correct = 0
    total = 0
    try:
        with no_grad():
            for i, item in enumerate(items):
                plan = make_mask_plan(
                    cfg.n_tokens, cfg.mask_percent, cfg.mask_span, (seed, 7777, i)
                )
                _, acc, logits = model.pretrain_loss(
                    item.mags[None], item.labels[None], [plan]
                )
                m = int(plan.mask.sum())
                correct += int(round(acc * m))
                total += m
    finally:
        model.train()
    return correct / total if total else None


def run_pretrain(
    model_cfg: ModelConfig, stage: StageConfig
) -> tuple[SeparationModel, TrainLog]:
    """Masked-unit pretraining with AdamW, warmup-then-drop LR, periodic
    validation masked accuracy, and best/latest checkpoints."""
    stage = stage.validate()
    if stage.labels_dir is None:
        raise ConfigError("pretraining requires labels_dir")
    out = Path(stage.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    entries = read_manifest(stage.manifest)
    train_entries = [e for e in entries if e.split == "train"]
    valid_entries = [e for e in entries if e.split == "valid"]
    if not train_entries:
        raise InputError("manifest has no train-split entries")
    train_items = _load_pretrain_items(train_entries, stage.labels_dir, model_cfg)
    valid_items = _load_pretrain_items(valid_entries, stage.labels_dir, model_cfg)
    start_step = 0
    if stage.resume_from:
        model, opt_state, start_step = load_checkpoint(stage.resume_from)
        if model.config.fingerprint() != model_cfg.fingerprint():
            raise InputError("resume checkpoint config does not match the run config")
        opt = make_optimizer(
            model, opt_state, lr=stage.base_lr, weight_decay=stage.weight_decay
        )
    else:
        model = SeparationModel(model_cfg, seed=stage.seed)
        opt = AdamW(model.params, lr=stage.base_lr, weight_decay=stage.weight_decay)
    schedule = LrSchedule(
        "warmup_then_drop",
        base_lr=stage.base_lr,
        warmup_steps=stage.warmup_steps,
        drop_step=stage.drop_step,
        drop_factor=stage.drop_factor,
    )
    log = TrainLog()
    best_acc = -1.0
    stale = 0
    model.train()
    cfg = model.config
    for step in range(start_step, stage.steps):
        idxs = _epoch_batch(step, len(train_items), stage.batch_size, stage.seed)
        mags = np.stack([train_items[i].mags for i in idxs])
        labels = np.stack([train_items[i].labels for i in idxs])
        plans = [
            make_mask_plan(cfg.n_tokens, cfg.mask_percent, cfg.mask_span,
                           (stage.seed, step, int(i)))
            for i in idxs
        ]
        loss, acc, _ = model.pretrain_loss(mags, labels, plans)
        value = float(loss.data)
        if not np.isfinite(value):
            raise NumericalError(f"non-finite pretraining loss at step {step}")
        opt.zero_grad()
        loss.backward()
        clip_global_norm(model.params, stage.grad_clip)
        lr = lr_at(schedule, step)
        opt.step(lr)
        log.add(step, lr=lr, loss=value, masked_accuracy=acc)
        if (step + 1) % stage.val_every == 0 or step + 1 == stage.steps:
            vacc = _validation_accuracy(model, valid_items, stage.seed)
            save_checkpoint(out / "latest.pacc", model, opt, step + 1)
            if vacc is not None:
                log.add_validation(step, masked_accuracy=vacc)
                if vacc > best_acc:
                    best_acc = vacc
                    stale = 0
                    save_checkpoint(out / "best.pacc", model, opt, step + 1)
                else:
                    stale += 1
                    if stage.early_stop_patience and stale >= stage.early_stop_patience:
                        break
    save_checkpoint(out / "latest.pacc", model, opt, stage.steps)
    if best_acc < 0:
        save_checkpoint(out / "best.pacc", model, opt, stage.steps)
    log.write(out / "train_log.jsonl")
    (out / "run_config.cfg").write_text(model_cfg.to_text(), encoding="utf-8")
    return model, log


# ---------------------------------------------------------------------------
# fine-tuning
# ---------------------------------------------------------------------------


@dataclass
class _Song:
    mixture: np.ndarray    # [C x L]
    stems: np.ndarray      # [S x C x L]


def _load_songs(entries: list[ManifestEntry], cfg: ModelConfig) -> list[_Song]:
    songs = []
    for e in entries:
        mix = read_wav(e.path).to_stereo()
        if mix.sample_rate != cfg.sample_rate:
            raise InputError(f"{e.path}: rate {mix.sample_rate} != {cfg.sample_rate}")
        track_dir = Path(e.path).parent
        stems = []
        for name in cfg.source_names:
            stem_path = track_dir / f"{name}.wav"
            stem = read_wav(stem_path).to_stereo()
            if stem.length != mix.length:
                raise InputError(f"{stem_path}: stem length differs from the mixture")
            stems.append(stem.samples)
        songs.append(_Song(mix.samples, np.stack(stems)))
    return songs


def data_ratio_subset(n_songs: int, ratio: float, seed: int) -> np.ndarray:
    """Seeded song subset; prefixes nest, so the 25% set is inside the 50% set."""
    order = np.random.default_rng([seed, 555]).permutation(n_songs)
    count = max(1, int(round(ratio * n_songs)))
    return np.sort(order[:count])


def _crop(song: _Song, start: int, length: int) -> tuple[np.ndarray, np.ndarray]:
    return (
        song.mixture[:, start : start + length],
        song.stems[:, :, start : start + length],
    )


def _validation_l1(model: SeparationModel, songs: list[_Song], cfg: ModelConfig) -> float | None:
    if not songs:
        return None
    model.eval()
    total = 0.0
    try:
        with no_grad():
            for song in songs:
                start = max(0, (song.mixture.shape[1] - cfg.clip_samples) // 2)
                mix, target = _crop(song, start, cfg.clip_samples)
                spec = stft(AudioClip(mix, cfg.sample_rate), cfg.window, cfg.hop,
                            pad_frames_to=cfg.frames)
                masks = model.source_masks(np.abs(spec.bins)[None].astype(np.float32))
                est_bins = masks.data[0] * spec.bins[None]
                est = istft_core(est_bins, cfg.window, cfg.hop, cfg.clip_samples)
                total += float(np.abs(est - target).mean(axis=(1, 2)).sum())
    finally:
        model.train()
    return total / len(songs)


def run_finetune(
    model_cfg: ModelConfig, stage: StageConfig
) -> tuple[SeparationModel, TrainLog]:
    """Separation fine-tuning: L1 on time-domain stems, Adam with
    warmup-then-step-decay, random crop per song per step."""
    stage = stage.validate()
    out = Path(stage.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    entries = read_manifest(stage.manifest)
    train_entries = [e for e in entries if e.split == "train"]
    valid_entries = [e for e in entries if e.split == "valid"]
    if not train_entries:
        raise InputError("manifest has no train-split entries")
    if stage.data_ratio < 1.0:
        keep = data_ratio_subset(len(train_entries), stage.data_ratio, stage.seed)
        train_entries = [train_entries[i] for i in keep]
    train_songs = _load_songs(train_entries, model_cfg)
    valid_songs = _load_songs(valid_entries, model_cfg)
    start_step = 0
    if stage.resume_from:
        model, opt_state, start_step = load_checkpoint(stage.resume_from)
        opt = make_optimizer(model, opt_state, lr=stage.base_lr,
                             weight_decay=stage.weight_decay)
    elif stage.init_checkpoint:
        model, _, _ = load_checkpoint(stage.init_checkpoint)
        if model.config.fingerprint() != model_cfg.fingerprint():
            raise InputError("init checkpoint config does not match the run config")
        opt = AdamW(model.params, lr=stage.base_lr, weight_decay=stage.weight_decay)
    else:
        model = SeparationModel(model_cfg, seed=stage.seed)
        opt = AdamW(model.params, lr=stage.base_lr, weight_decay=stage.weight_decay)
    schedule = LrSchedule(
        "warmup_then_step_decay",
        base_lr=stage.base_lr,
        warmup_steps=stage.warmup_steps,
        decay_every=stage.decay_every,
        alpha=stage.alpha,
    )
    cfg = model.config
    log = TrainLog()
    best_l1 = np.inf
    stale = 0
    model.train()
    for step in range(start_step, stage.steps):
        idxs = _epoch_batch(step, len(train_songs), stage.batch_size, stage.seed)
        mixtures = []
        targets = []
        for i in idxs:
            song = train_songs[i]
            rng = np.random.default_rng([stage.seed, step, int(i)])
            span = song.mixture.shape[1] - cfg.clip_samples
            start = int(rng.integers(0, span + 1)) if span > 0 else 0
            mix, target = _crop(song, start, cfg.clip_samples)
            if stage.augment_channel_swap and rng.random() < 0.5:
                mix, target = mix[::-1], target[:, ::-1]
            if stage.augment_gain_db:
                gain = 10.0 ** (rng.uniform(-stage.augment_gain_db,
                                            stage.augment_gain_db) / 20.0)
                mix, target = mix * gain, target * gain
            mixtures.append(AudioClip(mix, cfg.sample_rate))
            targets.append(target)
        loss, value = model.separation_loss(mixtures, targets)
        if not np.isfinite(value):
            raise NumericalError(f"non-finite fine-tuning loss at step {step}")
        opt.zero_grad()
        loss.backward()
        clip_global_norm(model.params, stage.grad_clip)
        lr = lr_at(schedule, step)
        opt.step(lr)
        log.add(step, lr=lr, loss=value)
        if (step + 1) % stage.val_every == 0 or step + 1 == stage.steps:
            vl1 = _validation_l1(model, valid_songs, cfg)
            save_checkpoint(out / "latest.pacc", model, opt, step + 1)
            if vl1 is not None:
                log.add_validation(step, l1=vl1)
                if vl1 < best_l1:
                    best_l1 = vl1
                    stale = 0
                    save_checkpoint(out / "best.pacc", model, opt, step + 1)
                else:
                    stale += 1
                    if stage.early_stop_patience and stale >= stage.early_stop_patience:
                        break
    save_checkpoint(out / "latest.pacc", model, opt, stage.steps)
    if not np.isfinite(best_l1):
        save_checkpoint(out / "best.pacc", model, opt, stage.steps)
    log.write(out / "train_log.jsonl")
    (out / "run_config.cfg").write_text(model_cfg.to_text(), encoding="utf-8")
    return model, log


# ---------------------------------------------------------------------------
# latent relabeling (second SSL iteration)
# ---------------------------------------------------------------------------


def run_relabel(
    checkpoint_path: str,
    manifest_path: str,
    layer: int,
    k: int,
    seed: int,
    out_dir: str,
) -> KMeansModel:
    """Cluster bottleneck-layer latents over a corpus and rewrite label files."""
    model, _, _ = load_checkpoint(checkpoint_path)
    cfg = model.config
    if not (1 <= layer <= cfg.depth):
        raise ConfigError(f"layer {layer} outside [1, {cfg.depth}]")
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    entries = read_manifest(manifest_path)
    model.eval()
    latents = []
    with no_grad():
        for e in entries:
            clip = load_entry(e, expect_rate=cfg.sample_rate)
            spec = stft(clip, cfg.window, cfg.hop, pad_frames_to=cfg.frames)
            tokens, _ = model.encode(np.abs(spec.bins)[None].astype(np.float32))
            _, per_layer = model.bottleneck(tokens, collect_layers=True)
            latents.append(per_layer[layer - 1].data[0])
    stacked = np.concatenate(latents, axis=0)
    km = relabel_from_latents(stacked, k, seed)
    artifacts.write_kmeans(out / "kmeans.pack", km)
    for e, lat in zip(entries, latents):
        labels = kmeans_assign(km, lat).reshape(cfg.grid_t, cfg.grid_f)
        artifacts.write_labels(out / f"{clip_key(e.path, e.start)}.pacl", labels, k)
    return km


# ---------------------------------------------------------------------------
# split helpers
# ---------------------------------------------------------------------------


def make_validation_split(
    entries: list[ManifestEntry],
    counts: tuple[int, int] | None = None,
    valid_ratio: float | None = None,
    seed: int = 0,
) -> tuple[list[ManifestEntry], list[ManifestEntry]]:
    """Deterministic song-level split into (train, valid); disjoint, exhaustive."""
    songs: list[str] = []
    for e in entries:
        if e.path not in songs:
            songs.append(e.path)
    n = len(songs)
    if counts is not None:
        n_train, n_valid = counts
        if n_train + n_valid != n:
            raise ConfigError(f"counts {counts} do not cover {n} songs")
    elif valid_ratio is not None:
        n_valid = int(round(valid_ratio * n))
        n_train = n - n_valid
    else:
        raise ConfigError("need counts or valid_ratio")
    order = np.random.default_rng(seed).permutation(n)
    train_set = {songs[i] for i in order[:n_train]}
    train, valid = [], []
    for e in entries:
        if e.path in train_set:
            train.append(ManifestEntry(e.path, e.start, e.length, "train"))
        else:
            valid.append(ManifestEntry(e.path, e.start, e.length, "valid"))
    return train, valid
