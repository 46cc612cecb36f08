"""The separation network: conv encoder, transformer bottleneck, deconv decoder.

Geometry contract: the encoder's per-block strides multiply out to the patch
size (P_t, P_f), so the token grid equals the pseudo-label grid; tokens are
flattened time-major, matching the label pipeline's patch order.

Pretraining head: tokens are projected to E dims and scored against K
learned class embeddings by scaled cosine similarity; the cross-entropy runs
over masked positions only. The decoder mirrors the encoder with transposed
convolutions, additive projected skip connections, and a sigmoid head
producing one magnitude mask per source and channel.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field, fields, replace

import numpy as np

from . import autodiff as ad
from . import dsp
from .artifacts import fingerprint
from .audio import AudioClip
from .autodiff import Tensor
from .errors import ConfigError, InputError, NumericalError

# ---------------------------------------------------------------------------
# configuration
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class ModelConfig:
    channels: int = 2
    frames: int = 320
    bins: int = 1024
    bottleneck_dim: int = 384          # transformer hidden size == C_b
    depth: int = 12                    # transformer blocks
    heads: int = 8
    proj_dim: int = 256                # pretraining projection output dim
    n_classes: int = 960
    n_sources: int = 4
    source_names: tuple[str, ...] = ("vocals", "drums", "bass", "other")
    mask_percent: float = 40.0
    mask_span: int = 5
    logit_scale: float = 10.0
    enc_strides: tuple[tuple[int, int], ...] = (
        (2, 2), (2, 2), (2, 2), (2, 2), (2, 2), (1, 2),
    )
    enc_channels: tuple[int, ...] = (32, 64, 128, 256, 384, 384)
    sample_rate: int = 44100
    window: int = 2048
    hop: int = 441
    clip_samples: int = 132300

    @property
    def patch_t(self) -> int:
        return int(np.prod([s[0] for s in self.enc_strides]))

    @property
    def patch_f(self) -> int:
        return int(np.prod([s[1] for s in self.enc_strides]))

    @property
    def grid_t(self) -> int:
        return self.frames // self.patch_t

    @property
    def grid_f(self) -> int:
        return self.bins // self.patch_f

    @property
    def n_tokens(self) -> int:
        return self.grid_t * self.grid_f

    def validate(self) -> "ModelConfig":
        if len(self.enc_channels) != len(self.enc_strides):
            raise ConfigError("enc_channels and enc_strides must have equal length")
        if self.enc_channels[-1] != self.bottleneck_dim:
            raise ConfigError("last encoder width must equal the bottleneck dim")
        if self.frames % self.patch_t or self.bins % self.patch_f:
            raise ConfigError(
                f"[{self.frames} x {self.bins}] not divisible by strides product "
                f"[{self.patch_t} x {self.patch_f}]"
            )
        if self.bottleneck_dim % self.heads:
            raise ConfigError("hidden size must be divisible by head count")
        if not (0.0 < self.mask_percent < 100.0):
            raise ConfigError("mask_percent must be in (0, 100)")
        if self.logit_scale <= 0:
            raise ConfigError("logit_scale must be positive")
        if self.patch_f % 2:
            raise ConfigError("frequency patch size must be even")
        if self.n_sources != len(self.source_names):
            raise ConfigError("n_sources does not match source_names")
        if self.bins != self.window // 2:
            raise ConfigError("bins must equal window/2 (Nyquist dropped)")
        return self

    def to_text(self) -> str:
        lines = []
        for f in fields(self):
            v = getattr(self, f.name)
            if f.name == "enc_strides":
                v = ",".join(f"{a}x{b}" for a, b in v)
            elif isinstance(v, tuple):
                v = ",".join(str(x) for x in v)
            lines.append(f"{f.name} = {v}")
        return "\n".join(lines) + "\n"

    def fingerprint(self) -> int:
        return fingerprint(self.to_text())

    @staticmethod
    def from_dict(kv: dict[str, str]) -> "ModelConfig":
        base = ModelConfig()
        kwargs = {}
        for f in fields(ModelConfig):
            if f.name not in kv:
                continue
            raw = kv[f.name].strip()
            if f.name == "enc_strides":
                kwargs[f.name] = tuple(
                    tuple(int(p) for p in item.split("x")) for item in raw.split(",")
                )
            elif f.name == "enc_channels":
                kwargs[f.name] = tuple(int(x) for x in raw.split(","))
            elif f.name == "source_names":
                kwargs[f.name] = tuple(x.strip() for x in raw.split(","))
            else:
                current = getattr(base, f.name)
                kwargs[f.name] = type(current)(float(raw)) if isinstance(current, (int, float)) else raw
        return replace(base, **kwargs).validate()

    @staticmethod
    def from_text(text: str) -> "ModelConfig":
        kv = {}
        for line in text.splitlines():
            line = line.strip()
            if not line or line.startswith("#") or "=" not in line:
                continue
            key, value = line.split("=", 1)
            kv[key.strip()] = value.strip()
        return ModelConfig.from_dict(kv)


def toy_config() -> ModelConfig:
    """Desk-scale profile used by the synthetic corpus and the test suite."""
    return ModelConfig(
        channels=2,
        frames=128,
        bins=128,
        bottleneck_dim=32,
        depth=2,
        heads=2,
        proj_dim=16,
        n_classes=32,
        n_sources=2,
        source_names=("tonal", "percussive"),
        enc_strides=((2, 2), (2, 2), (2, 2), (2, 2), (1, 1), (1, 1)),
        enc_channels=(8, 16, 16, 32, 32, 32),
        sample_rate=8000,
        window=256,
        hop=64,
        clip_samples=8000,
    ).validate()


# ---------------------------------------------------------------------------
# span masking
# ---------------------------------------------------------------------------


@dataclass
class MaskPlan:
    starts: np.ndarray
    mask: np.ndarray  # bool [n_tokens]

    @property
    def masked_indices(self) -> np.ndarray:
        return np.nonzero(self.mask)[0]


def make_mask_plan(n_tokens: int, percent: float, span: int, seed) -> MaskPlan:
    """Draw round(percent% * n_tokens) start indices without replacement and
    mask `span` tokens from each; spans may overlap and truncate at the end."""
    if n_tokens < span:
        raise InputError(f"{n_tokens} tokens is fewer than the span length {span}")
    n_starts = int(round(percent / 100.0 * n_tokens))
    if n_starts == 0:
        raise InputError(f"mask percent {percent} yields zero start indices")
    rng = np.random.default_rng(seed)
    starts = np.sort(rng.choice(n_tokens, size=n_starts, replace=False))
    mask = np.zeros(n_tokens, dtype=bool)
    for s in starts:
        mask[s : s + span] = True
    return MaskPlan(starts=starts, mask=mask)


# ---------------------------------------------------------------------------
# parameter initialization
# ---------------------------------------------------------------------------


def _he(rng, shape, fan_in, dtype):
    return (rng.standard_normal(shape) * math.sqrt(2.0 / fan_in)).astype(dtype)


class SeparationModel:
    """Parameters plus the forward graphs for pretraining and separation."""

    def __init__(self, config: ModelConfig, seed: int = 0, dtype=np.float32):
        self.config = config.validate()
        self.dtype = np.dtype(dtype)
        self.training = True
        self.params: dict[str, Tensor] = {}
        self.buffers: dict[str, np.ndarray] = {}
        self._build(np.random.default_rng(seed))

    # -- construction ------------------------------------------------------
    def _param(self, name: str, value: np.ndarray) -> None:
        self.params[name] = Tensor(value.astype(self.dtype), requires_grad=True)

    def _bn(self, name: str, width: int) -> None:
        self._param(f"{name}.g", np.ones(width))
        self._param(f"{name}.b", np.zeros(width))
        self.buffers[f"{name}.mean"] = np.zeros(width, dtype=self.dtype)
        self.buffers[f"{name}.var"] = np.ones(width, dtype=self.dtype)

    def _conv(self, rng, name: str, cin: int, cout: int, k: tuple[int, int]) -> None:
        self._param(f"{name}.w", _he(rng, (cout, cin, *k), cin * k[0] * k[1], self.dtype))
        self._param(f"{name}.b", np.zeros(cout))

    def _tconv(self, rng, name: str, cin: int, cout: int, k: tuple[int, int]) -> None:
        self._param(f"{name}.w", _he(rng, (cin, cout, *k), cin * k[0] * k[1], self.dtype))
        self._param(f"{name}.b", np.zeros(cout))

    def _linear(self, rng, name: str, din: int, dout: int, scale: float = 1.0) -> None:
        w = rng.standard_normal((din, dout)) * scale / math.sqrt(din)
        self._param(f"{name}.w", w.astype(self.dtype))
        self._param(f"{name}.b", np.zeros(dout))

    def _ln(self, name: str, width: int) -> None:
        self._param(f"{name}.g", np.ones(width))
        self._param(f"{name}.b", np.zeros(width))

    def _build(self, rng) -> None:
        cfg = self.config
        widths = cfg.enc_channels
        cin = cfg.channels
        for i, (w, stride) in enumerate(zip(widths, cfg.enc_strides)):
            self._conv(rng, f"enc{i}.c1", cin, w, (3, 3))
            self._bn(f"enc{i}.bn1", w)
            self._conv(rng, f"enc{i}.c2", w, w, (3, 3))
            self._bn(f"enc{i}.bn2", w)
            if cin != w:
                self._conv(rng, f"enc{i}.proj", cin, w, (1, 1))
            self._conv(rng, f"enc{i}.down", w, w, (3, 3))
            self._bn(f"enc{i}.dbn", w)
            cin = w
        h = cfg.bottleneck_dim
        self._param("pos_emb", rng.standard_normal((cfg.n_tokens, h)) * 0.02)
        self._param("mask_emb", rng.standard_normal(h) * 0.02)
        for j in range(cfg.depth):
            self._ln(f"tf{j}.ln1", h)
            for nm in ("q", "k", "v", "o"):
                self._linear(rng, f"tf{j}.{nm}", h, h)
            self._ln(f"tf{j}.ln2", h)
            self._linear(rng, f"tf{j}.fc1", h, 4 * h)
            self._linear(rng, f"tf{j}.fc2", 4 * h, h)
        self._ln("final_ln", h)
        self._linear(rng, "proj", h, cfg.proj_dim)
        self._param("class_emb", rng.standard_normal((cfg.n_classes, cfg.proj_dim)) * 0.02)
        # decoder mirrors the encoder in reverse
        for i in reversed(range(len(widths))):
            w = widths[i]
            out_w = widths[i - 1] if i > 0 else widths[0]
            st, sf = cfg.enc_strides[i]
            self._tconv(rng, f"dec{i}.up", w, w, (st + 2, sf + 2))
            self._bn(f"dec{i}.upbn", w)
            self._conv(rng, f"dec{i}.skip", w, w, (1, 1))
            self._conv(rng, f"dec{i}.c1", w, out_w, (3, 3))
            self._bn(f"dec{i}.bn1", out_w)
            self._conv(rng, f"dec{i}.c2", out_w, out_w, (3, 3))
            self._bn(f"dec{i}.bn2", out_w)
            if w != out_w:
                self._conv(rng, f"dec{i}.proj", w, out_w, (1, 1))
        self._conv(rng, "head", widths[0], cfg.n_sources * cfg.channels, (1, 1))

    # -- mode --------------------------------------------------------------
    def train(self) -> None:
        self.training = True

    def eval(self) -> None:
        self.training = False

    # -- layers ------------------------------------------------------------
    def _apply_bn(self, name: str, x: Tensor) -> Tensor:
        return ad.batch_norm(
            x,
            self.params[f"{name}.g"],
            self.params[f"{name}.b"],
            self.buffers[f"{name}.mean"],
            self.buffers[f"{name}.var"],
            training=self.training,
        )

    def _res_stage(self, prefix: str, x: Tensor, cin: int, cout: int) -> Tensor:
        h = ad.conv2d(x, self.params[f"{prefix}.c1.w"], self.params[f"{prefix}.c1.b"])
        h = ad.gelu(self._apply_bn(f"{prefix}.bn1", h))
        h = ad.conv2d(h, self.params[f"{prefix}.c2.w"], self.params[f"{prefix}.c2.b"])
        h = self._apply_bn(f"{prefix}.bn2", h)
        if cin != cout:
            x = ad.conv2d(
                x, self.params[f"{prefix}.proj.w"], self.params[f"{prefix}.proj.b"],
                padding=(0, 0),
            )
        return ad.gelu(h + x)

    def encode(self, mags: np.ndarray) -> tuple[Tensor, list[Tensor]]:
        """Magnitudes [B x C x T x F] -> time-major tokens [B x n_tokens x C_b]."""
        cfg = self.config
        if mags.shape[1:] != (cfg.channels, cfg.frames, cfg.bins):
            raise InputError(
                f"input {mags.shape} does not match configured "
                f"[{cfg.channels} x {cfg.frames} x {cfg.bins}]"
            )
        x = Tensor(np.ascontiguousarray(mags, dtype=self.dtype))
        skips: list[Tensor] = []
        cin = cfg.channels
        for i, (w, stride) in enumerate(zip(cfg.enc_channels, cfg.enc_strides)):
            x = self._res_stage(f"enc{i}", x, cin, w)
            skips.append(x)
            x = ad.conv2d(
                x, self.params[f"enc{i}.down.w"], self.params[f"enc{i}.down.b"],
                stride=stride,
            )
            x = ad.gelu(self._apply_bn(f"enc{i}.dbn", x))
            cin = w
        b = x.shape[0]
        tokens = ad.reshape(
            ad.permute(x, (0, 2, 3, 1)), (b, cfg.n_tokens, cfg.bottleneck_dim)
        )
        return tokens, skips

    def bottleneck(
        self,
        tokens: Tensor,
        mask: np.ndarray | None = None,
        collect_layers: bool = False,
    ) -> Tensor | tuple[Tensor, list[Tensor]]:
        """Pre-norm transformer stack over [B x n x h] tokens.

        `mask` is a boolean [B x n]; masked positions are replaced by the
        learned mask embedding before the first block. With collect_layers,
        per-block outputs come back too (block ell output = layer ell latents).
        """
        cfg = self.config
        x = tokens
        if mask is not None:
            keep = (~mask).astype(self.dtype)[..., None]
            fill = mask.astype(self.dtype)[..., None]
            x = x * Tensor(keep) + self.params["mask_emb"] * Tensor(fill)
        x = x + self.params["pos_emb"]
        layer_outputs: list[Tensor] = []
        for j in range(cfg.depth):
            pre = ad.layer_norm(x, self.params[f"tf{j}.ln1.g"], self.params[f"tf{j}.ln1.b"])
            q = ad.linear(pre, self.params[f"tf{j}.q.w"], self.params[f"tf{j}.q.b"])
            k = ad.linear(pre, self.params[f"tf{j}.k.w"], self.params[f"tf{j}.k.b"])
            v = ad.linear(pre, self.params[f"tf{j}.v.w"], self.params[f"tf{j}.v.b"])
            attn_out, _ = ad.scaled_dot_attention(q, k, v, cfg.heads)
            x = x + ad.linear(attn_out, self.params[f"tf{j}.o.w"], self.params[f"tf{j}.o.b"])
            pre2 = ad.layer_norm(x, self.params[f"tf{j}.ln2.g"], self.params[f"tf{j}.ln2.b"])
            hmid = ad.gelu(ad.linear(pre2, self.params[f"tf{j}.fc1.w"], self.params[f"tf{j}.fc1.b"]))
            x = x + ad.linear(hmid, self.params[f"tf{j}.fc2.w"], self.params[f"tf{j}.fc2.b"])
            if collect_layers:
                layer_outputs.append(x)
        x = ad.layer_norm(x, self.params["final_ln.g"], self.params["final_ln.b"])
        if collect_layers:
            return x, layer_outputs
        return x

    def cosine_logits(self, tokens: Tensor, token_indices: np.ndarray) -> Tensor:
        """Scaled cosine similarity of selected projected tokens vs class embeddings."""
        cfg = self.config
        b, n, h = tokens.shape
        proj = ad.linear(tokens, self.params["proj.w"], self.params["proj.b"])
        flat = ad.reshape(proj, (b * n, cfg.proj_dim))
        sel = ad.take_rows(flat, token_indices)
        sel_norm = ad.sqrt(ad.reduce_sum(sel * sel, axis=-1, keepdims=True) + 1e-12)
        o = sel / sel_norm
        emb = self.params["class_emb"]
        emb_norm = ad.sqrt(ad.reduce_sum(emb * emb, axis=-1, keepdims=True) + 1e-12)
        e = emb / emb_norm
        cos = ad.matmul(o, ad.permute(e, (1, 0)))
        return cos * Tensor(np.asarray(cfg.logit_scale, dtype=self.dtype))

    def pretrain_loss(
        self,
        mags: np.ndarray,
        labels: np.ndarray,
        plans: list[MaskPlan],
    ) -> tuple[Tensor, float, np.ndarray]:
        """Masked-prediction loss over a batch.

        mags [B x C x T x F], labels [B x n_tokens], one MaskPlan per item.
        Returns (loss, masked accuracy, logits over the masked tokens).
        """
        b = mags.shape[0]
        n = self.config.n_tokens
        mask = np.stack([p.mask for p in plans])
        if not mask.any():
            raise InputError("empty mask: no positions to predict")
        tokens, _ = self.encode(mags)
        out = self.bottleneck(tokens, mask=mask)
        flat_idx = np.nonzero(mask.reshape(b * n))[0]
        logits = self.cosine_logits(out, flat_idx)
        flat_labels = labels.reshape(b * n)[flat_idx]
        loss = ad.cross_entropy(logits, flat_labels)
        predictions = np.argmax(logits.data, axis=-1)
        accuracy = float(np.mean(predictions == flat_labels))
        return loss, accuracy, logits.data

    def decode(self, tokens: Tensor, skips: list[Tensor]) -> Tensor:
        """Tokens plus encoder skips -> sigmoid masks [B x S x C x T x F]."""
        cfg = self.config
        b = tokens.shape[0]
        x = ad.permute(
            ad.reshape(tokens, (b, cfg.grid_t, cfg.grid_f, cfg.bottleneck_dim)),
            (0, 3, 1, 2),
        )
        widths = cfg.enc_channels
        for i in reversed(range(len(widths))):
            w = widths[i]
            out_w = widths[i - 1] if i > 0 else widths[0]
            st, sf = cfg.enc_strides[i]
            x = ad.conv2d_transpose(
                x, self.params[f"dec{i}.up.w"], self.params[f"dec{i}.up.b"],
                stride=(st, sf), padding=(1, 1),
            )
            x = self._apply_bn(f"dec{i}.upbn", x)
            skip = ad.conv2d(
                skips[i], self.params[f"dec{i}.skip.w"], self.params[f"dec{i}.skip.b"],
                padding=(0, 0),
            )
            x = ad.gelu(x + skip)
            x = self._res_stage(f"dec{i}", x, w, out_w)
        x = ad.conv2d(x, self.params["head.w"], self.params["head.b"], padding=(0, 0))
        masks = ad.sigmoid(x)
        return ad.reshape(
            masks, (b, cfg.n_sources, cfg.channels, cfg.frames, cfg.bins)
        )

    def source_masks(self, mags: np.ndarray) -> Tensor:
        tokens, skips = self.encode(mags)
        out = self.bottleneck(tokens)
        return self.decode(out, skips)

    # -- separation --------------------------------------------------------
    def separate_clip(self, clip: AudioClip) -> list[AudioClip]:
        """Separate one configured-length clip; longer audio goes through
        overlap-add chunking with a triangular cross-fade."""
        cfg = self.config
        if clip.sample_rate != cfg.sample_rate:
            raise InputError(
                f"clip rate {clip.sample_rate} != configured {cfg.sample_rate}"
            )
        clip = clip.to_stereo() if cfg.channels == 2 else clip
        if clip.length <= cfg.clip_samples:
            pad = cfg.clip_samples - clip.length
            padded = AudioClip(
                np.pad(clip.samples, ((0, 0), (0, pad))), clip.sample_rate
            ) if pad else clip
            stems = self._separate_exact(padded)
            return [AudioClip(s.samples[:, : clip.length], s.sample_rate) for s in stems]
        hop = cfg.clip_samples // 2
        weights = np.bartlett(cfg.clip_samples + 2)[1:-1]
        acc = np.zeros((cfg.n_sources, clip.channels, clip.length))
        wacc = np.zeros(clip.length)
        start = 0
        while start < clip.length:
            end = min(start + cfg.clip_samples, clip.length)
            chunk = clip.samples[:, start:end]
            if chunk.shape[1] < cfg.clip_samples:
                chunk = np.pad(chunk, ((0, 0), (0, cfg.clip_samples - chunk.shape[1])))
            stems = self._separate_exact(AudioClip(chunk, clip.sample_rate))
            n = end - start
            for s, stem in enumerate(stems):
                acc[s, :, start:end] += stem.samples[:, :n] * weights[:n]
            wacc[start:end] += weights[:n]
            if end == clip.length:
                break
            start += hop
        acc /= np.maximum(wacc, 1e-12)
        return [AudioClip(acc[s], clip.sample_rate) for s in range(cfg.n_sources)]

    def _separate_exact(self, clip: AudioClip) -> list[AudioClip]:
        cfg = self.config
        spec = dsp.stft(clip, cfg.window, cfg.hop, pad_frames_to=cfg.frames)
        mags = np.abs(spec.bins)[None, ...].astype(self.dtype)
        was_training = self.training
        self.eval()
        try:
            with ad.no_grad():
                masks = self.source_masks(mags).data[0]
        finally:
            self.training = was_training
        stems = []
        for s in range(cfg.n_sources):
            masked = spec.bins * masks[s]
            stem_spec = dsp.Spectrogram(masked, cfg.hop, cfg.window, cfg.sample_rate)
            stems.append(dsp.istft(stem_spec, clip.length))
        return stems

    def separation_loss(
        self, mixtures: list[AudioClip], stems: list[np.ndarray]
    ) -> tuple[Tensor, float]:
        """L1 between synthesized source signals and target stems.

        stems[i] is [S x C x L] for mixture i. The loss sums over sources and
        averages over samples/channels, with gradients flowing through the
        synthesis transform back into the masks.
        """
        cfg = self.config
        losses = []
        for clip, target in zip(mixtures, stems):
            spec = dsp.stft(clip, cfg.window, cfg.hop, pad_frames_to=cfg.frames)
            mags = np.abs(spec.bins)[None, ...].astype(self.dtype)
            masks = self.source_masks(mags)  # [1, S, C, T, F]
            masks = ad.reshape(
                masks, (cfg.n_sources, cfg.channels, cfg.frames, cfg.bins)
            )
            est = synthesize_sources(masks, spec, clip.length)
            per_source = ad.reduce_mean(
                ad.absolute(est - Tensor(np.asarray(target))), axis=(1, 2)
            )
            losses.append(ad.reduce_sum(per_source))
        total = losses[0]
        for item in losses[1:]:
            total = total + item
        loss = total * Tensor(np.asarray(1.0 / len(losses)))
        return loss, float(loss.data)


def synthesize_sources(masks: Tensor, spec: dsp.Spectrogram, out_len: int) -> Tensor:
    """masks [S x C x T x F] times mixture magnitude/phase -> signals [S x C x L].

    The mixture phase is reused: masked_complex = mask * |X| * exp(j*angle(X)).
    Differentiable with respect to the masks through the synthesis adjoint.
    """
    mag = np.abs(spec.bins)
    cos_p = np.ones_like(mag)
    sin_p = np.zeros_like(mag)
    nz = mag > 0
    cos_p[nz] = spec.bins.real[nz] / mag[nz]
    sin_p[nz] = spec.bins.imag[nz] / mag[nz]
    masked = masks * Tensor(mag[None].astype(masks.dtype))
    real = masked * Tensor(cos_p[None].astype(masks.dtype))
    imag = masked * Tensor(sin_p[None].astype(masks.dtype))
    return istft_synthesis(real, imag, spec.window_size, spec.frame_hop, out_len)


def istft_synthesis(real: Tensor, imag: Tensor, window: int, hop: int, out_len: int) -> Tensor:
    """Differentiable overlap-add synthesis of (re, im) half-spectra."""
    bins = real.data.astype(np.float64) + 1j * imag.data.astype(np.float64)
    out = dsp.istft_core(bins, window, hop, out_len).astype(real.dtype)
    n_frames = real.shape[-2]

    def backward(g):
        grad = dsp.istft_adjoint(g.astype(np.float64), window, hop, n_frames)
        if real.requires_grad:
            real.accumulate(grad.real.astype(real.dtype))
        if imag.requires_grad:
            imag.accumulate(grad.imag.astype(imag.dtype))

    return ad.make_node(out, (real, imag), backward)
