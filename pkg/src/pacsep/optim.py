"""AdamW optimizer with decoupled weight decay, plus the LR schedules.

Two schedule shapes: linear warmup followed by a single drop at a fixed
step, and linear warmup followed by geometric decay every fixed number of
steps.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .autodiff import Tensor
from .errors import ConfigError, NumericalError


@dataclass
class LrSchedule:
    kind: str                      # "warmup_then_drop" | "warmup_then_step_decay"
    base_lr: float
    warmup_steps: int
    drop_step: int = 0             # warmup_then_drop
    drop_factor: float = 0.1
    decay_every: int = 0           # warmup_then_step_decay
    alpha: float = 0.9

    def __post_init__(self) -> None:
        if self.kind not in ("warmup_then_drop", "warmup_then_step_decay"):
            raise ConfigError(f"unknown schedule kind {self.kind!r}")
        if self.warmup_steps < 0:
            raise ConfigError("warmup_steps must be >= 0")
        if not (0.0 < self.alpha <= 1.0):
            raise ConfigError("alpha must be in (0, 1]")


def lr_at(schedule: LrSchedule, step: int) -> float:
    """Learning rate at a (0-based) optimizer step."""
    if step < 0:
        raise ConfigError("step must be >= 0")
    if schedule.warmup_steps > 0 and step < schedule.warmup_steps:
        return schedule.base_lr * step / schedule.warmup_steps
    if schedule.kind == "warmup_then_drop":
        if schedule.drop_step and step >= schedule.drop_step:
            return schedule.base_lr * schedule.drop_factor
        return schedule.base_lr
    if schedule.decay_every <= 0:
        return schedule.base_lr
    periods = (step - schedule.warmup_steps) // schedule.decay_every
    return schedule.base_lr * schedule.alpha**periods


@dataclass
class AdamW:
    """Decoupled-weight-decay Adam over a named parameter dict."""

    params: dict[str, Tensor]
    lr: float = 5e-4
    betas: tuple[float, float] = (0.9, 0.999)
    eps: float = 1e-8
    weight_decay: float = 0.01
    step_count: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)

    def __post_init__(self) -> None:
        for name, p in self.params.items():
            self.m.setdefault(name, np.zeros_like(p.data))
            self.v.setdefault(name, np.zeros_like(p.data))

    def step(self, lr: float | None = None) -> None:
        """One update from the gradients currently stored on the parameters.

        A non-finite gradient anywhere skips the whole step and raises so
        the caller can report and decide.
        """
        lr = self.lr if lr is None else lr
        b1, b2 = self.betas
        for name, p in self.params.items():
            g = p.grad
            if g is None:
                continue
            if not np.all(np.isfinite(g)):
                raise NumericalError(f"non-finite gradient in {name}; step skipped")
        self.step_count += 1
        t = self.step_count
        bc1 = 1.0 - b1**t
        bc2 = 1.0 - b2**t
        for name, p in self.params.items():
            g = p.grad
            if g is None:
                continue
            m = self.m[name]
            v = self.v[name]
            m *= b1
            m += (1.0 - b1) * g
            v *= b2
            v += (1.0 - b2) * g * g
            update = (m / bc1) / (np.sqrt(v / bc2) + self.eps)
            if self.weight_decay:
                update = update + self.weight_decay * p.data
            p.data -= (lr * update).astype(p.data.dtype)

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.grad = None

    def state_arrays(self) -> dict[str, np.ndarray]:
        out: dict[str, np.ndarray] = {}
        for name in self.params:
            out[f"m.{name}"] = self.m[name]
            out[f"v.{name}"] = self.v[name]
        return out

    def load_state(self, arrays: dict[str, np.ndarray], step_count: int) -> None:
        for name in self.params:
            self.m[name] = arrays[f"m.{name}"].copy()
            self.v[name] = arrays[f"v.{name}"].copy()
        self.step_count = step_count


def clip_global_norm(params: dict[str, Tensor], max_norm: float) -> float:
    """Scale all gradients so their joint L2 norm is at most max_norm."""
    total = 0.0
    for p in params.values():
        if p.grad is not None:
            total += float(np.sum(p.grad.astype(np.float64) ** 2))
    norm = float(np.sqrt(total))
    if max_norm > 0 and norm > max_norm:
        scale = max_norm / (norm + 1e-12)
        for p in params.values():
            if p.grad is not None:
                p.grad *= scale
    return norm
