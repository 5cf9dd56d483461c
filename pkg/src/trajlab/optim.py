"""AdamW with decoupled weight decay, global-norm clipping, LR and batch-size schedules.

Schedules are functions of tokens consumed, not iterations, so switching the
batch size mid-run leaves the learning-rate profile unchanged.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .model import NumericFault, ParamSet, is_gain


@dataclass(frozen=True)
class OptimConfig:
    peak_lr: float
    weight_decay: float
    beta1: float = 0.9
    beta2: float = 0.95
    adam_eps: float = 1e-8
    clip_norm: float = 1.0
    decay_gains: bool = False  # RMSNorm gains are excluded from decay by default

    def __post_init__(self):
        if not (0.0 <= self.beta1 < 1.0 and 0.0 <= self.beta2 < 1.0):
            raise ValueError(f"betas must lie in [0, 1): {self.beta1}, {self.beta2}")
        if not self.peak_lr >= 0:
            raise ValueError(f"peak_lr must be >= 0, got {self.peak_lr}")
        if not self.weight_decay >= 0:
            raise ValueError(f"weight_decay must be >= 0, got {self.weight_decay}")
        if not self.clip_norm > 0:
            raise ValueError(f"clip_norm must be > 0, got {self.clip_norm}")

    @property
    def elr(self) -> float:
        """Effective learning rate eta * lambda."""
        return self.peak_lr * self.weight_decay

    def decays(self, name: str) -> bool:
        return self.decay_gains or not is_gain(name)


@dataclass
class AdamState:
    m: ParamSet
    v: ParamSet
    t: int = 0

    @classmethod
    def fresh(cls, params: ParamSet) -> "AdamState":
        return cls(ParamSet.zeros(params.config), ParamSet.zeros(params.config), 0)

    def vhat(self, beta2: float) -> ParamSet | None:
        """Bias-corrected second moments, or None before the first step."""
        if self.t == 0:
            return None
        c = 1.0 - beta2**self.t
        return ParamSet(self.v.config, {n: a / c for n, a in self.v.items()})


def global_norm(grads: ParamSet) -> float:
    return grads.norm()


def clip_global_norm(grads: ParamSet, clip_norm: float) -> tuple[ParamSet, float]:
    """Rescale so the global l2 norm is at most ``clip_norm``; returns the scale used."""
    norm = global_norm(grads)
    if not math.isfinite(norm):
        raise NumericFault("gradient norm")
    if norm <= clip_norm:
        return grads, 1.0
    scale = clip_norm / norm
    return ParamSet(grads.config, {n: g * scale for n, g in grads.items()}), scale


def adamw_step(params: ParamSet, grads: ParamSet, state: AdamState, lr: float,
               config: OptimConfig) -> tuple[ParamSet, AdamState]:
    """One AdamW update, in place.

    ``w <- w - lr * mhat / (sqrt(vhat) + eps) - lr * wd * w`` where the decay
    term uses the pre-update weights and never enters the moments.
    """
    if lr < 0:
        raise ValueError(f"lr must be >= 0, got {lr}")
    b1, b2, eps = config.beta1, config.beta2, config.adam_eps
    state.t += 1
    c1 = 1.0 - b1**state.t
    c2 = 1.0 - b2**state.t
    for name, w in params.items():
        g = grads[name]
        m = state.m[name]
        v = state.v[name]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * (g * g)
        update = (m / c1) / (np.sqrt(v / c2) + eps)
        if config.decays(name) and config.weight_decay != 0.0:
            w -= lr * update + (lr * config.weight_decay) * w
        else:
            w -= lr * update
    params.touch()
    return params, state


# ---------------------------------------------------------------------------
# schedules
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class LrSchedule:
    kind: str  # "constant" | "wsd"
    total_tokens: int
    warmup_tokens: int = 0
    decay_tokens: int = 0

    def __post_init__(self):
        if self.kind not in ("constant", "wsd"):
            raise ValueError(f"unknown lr schedule kind {self.kind!r}")
        if self.warmup_tokens < 0 or self.decay_tokens < 0 or self.total_tokens <= 0:
            raise ValueError("token counts must be non-negative and total positive")
        if self.kind == "constant" and self.decay_tokens:
            raise ValueError("constant schedule has no decay window")
        if self.warmup_tokens + self.decay_tokens > self.total_tokens:
            raise ValueError(
                f"warmup ({self.warmup_tokens}) + decay ({self.decay_tokens}) exceeds total ({self.total_tokens})"
            )


def lr_at(schedule: LrSchedule, tokens: float, peak_lr: float = 1.0) -> float:
    """Learning rate after ``tokens`` tokens: linear warmup, flat, then (WSD) linear decay to zero."""
    if tokens < 0 or tokens > schedule.total_tokens:
        raise ValueError(f"tokens={tokens} outside [0, {schedule.total_tokens}]")
    if tokens < schedule.warmup_tokens:
        return peak_lr * tokens / schedule.warmup_tokens
    if schedule.kind == "wsd" and schedule.decay_tokens > 0:
        start = schedule.total_tokens - schedule.decay_tokens
        if tokens > start:
            return peak_lr * (schedule.total_tokens - tokens) / schedule.decay_tokens
    return peak_lr


@dataclass(frozen=True)
class BsSchedule:
    kind: str = "fixed"  # "fixed" | "type2"
    batch_size: int = 32
    b_small: int = 0
    b_large: int = 0
    switch_tokens: int = 0

    def __post_init__(self):
        if self.kind == "fixed":
            if self.batch_size < 1:
                raise ValueError("batch_size must be >= 1")
        elif self.kind == "type2":
            if not 1 <= self.b_small < self.b_large:
                raise ValueError(f"type2 needs 1 <= b_small < b_large, got {self.b_small}, {self.b_large}")
            if self.switch_tokens < 0:
                raise ValueError("switch_tokens must be >= 0")
        else:
            raise ValueError(f"unknown batch-size schedule kind {self.kind!r}")

    @classmethod
    def fixed(cls, batch_size: int) -> "BsSchedule":
        return cls(kind="fixed", batch_size=batch_size)

    @classmethod
    def type2(cls, b_small: int, b_large: int, switch_tokens: int) -> "BsSchedule":
        return cls(kind="type2", batch_size=0, b_small=b_small, b_large=b_large, switch_tokens=switch_tokens)


def batch_size_at(schedule: BsSchedule, tokens: int) -> int:
    if schedule.kind == "fixed":
        return schedule.batch_size
    return schedule.b_large if tokens >= schedule.switch_tokens else schedule.b_small
