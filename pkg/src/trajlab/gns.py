"""Preconditioned gradient-noise-scale estimation.

Each measurement takes the preconditioned squared norm of a micro-batch
gradient (size ``b_small``) and of the full-batch gradient (size ``b_big``).
Under ``E||G_b||^2 = ||g||^2 + tr(Sigma) / b`` the two-point solve gives
unbiased estimates of the gradient norm and the noise trace, both measured in
Adam's metric ``P = diag(vhat)``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from enum import Enum
from typing import Iterable, Sequence

import numpy as np

from .model import ParamSet


class NoValidPointsError(ValueError):
    pass


@dataclass(frozen=True)
class GnsSample:
    b_small: int
    b_big: int
    sqnorm_small: float
    sqnorm_big: float

    def __post_init__(self):
        if not 0 < self.b_small < self.b_big:
            raise ValueError(f"need 0 < b_small < b_big, got {self.b_small}, {self.b_big}")
        if self.sqnorm_small < 0 or self.sqnorm_big < 0:
            raise ValueError("squared norms must be non-negative")


@dataclass(frozen=True)
class RawGns:
    tr_noise: float
    gnorm2: float
    valid: bool


@dataclass(frozen=True)
class GnsEstimate:
    tr_noise: float
    gnorm2: float
    b_precond: float
    scaled_noise: float  # (lr / B) * tr_noise
    scaled_gnorm2: float  # lr * gnorm2
    valid: bool

    @classmethod
    def invalid(cls) -> "GnsEstimate":
        nan = float("nan")
        return cls(nan, nan, nan, nan, nan, False)


def precond_sqnorm(g: ParamSet | np.ndarray, vhat: ParamSet | np.ndarray | None, eps: float) -> float:
    """``sum_i g_i^2 / (vhat_i + eps^2)``; ``vhat=None`` means the identity metric."""
    # both paths use the same elementwise sum, so vhat = 1, eps = 0 is bitwise the identity metric
    if isinstance(g, ParamSet):
        if vhat is None:
            return float(sum(float(np.sum(g[n] * g[n])) for n in g.names()))
        return float(sum(_qform(g[n], vhat[n], eps) for n in g.names()))
    g = np.asarray(g, dtype=np.float64)
    if vhat is None:
        return float(np.sum(g * g))
    return _qform(g, np.asarray(vhat, dtype=np.float64), eps)


def _qform(g, v, eps):
    if g.shape != v.shape:
        raise ValueError(f"shape mismatch {g.shape} vs {v.shape}")
    return float(np.sum(g * g / (v + eps * eps)))


def estimate_step(sample: GnsSample) -> RawGns:
    bs, bb = sample.b_small, sample.b_big
    gnorm2 = (bb * sample.sqnorm_big - bs * sample.sqnorm_small) / (bb - bs)
    tr_noise = (sample.sqnorm_small - sample.sqnorm_big) / (1.0 / bs - 1.0 / bb)
    return RawGns(tr_noise=tr_noise, gnorm2=gnorm2, valid=(tr_noise >= 0 and gnorm2 >= 0))


class GnsSmoother:
    """Bias-corrected EMAs of the noise trace and gradient norm, ratio formed afterwards."""

    def __init__(self, halflife_steps: float = 100.0):
        if halflife_steps < 1:
            raise ValueError(f"halflife must be >= 1 step, got {halflife_steps}")
        self.halflife = float(halflife_steps)
        self.decay = 0.5 ** (1.0 / self.halflife)
        self.num_tr = 0.0
        self.num_g = 0.0
        self.weight = 0.0

    def update(self, raw: RawGns, lr: float = 0.0, batch_size: int = 1) -> GnsEstimate:
        # negative raw values are kept: clamping would bias the average
        if math.isfinite(raw.tr_noise) and math.isfinite(raw.gnorm2):
            self.num_tr = self.decay * self.num_tr + (1.0 - self.decay) * raw.tr_noise
            self.num_g = self.decay * self.num_g + (1.0 - self.decay) * raw.gnorm2
            self.weight = self.decay * self.weight + (1.0 - self.decay)
        return self.current(lr, batch_size)

    def current(self, lr: float = 0.0, batch_size: int = 1) -> GnsEstimate:
        if self.weight == 0.0:
            return GnsEstimate.invalid()
        tr = self.num_tr / self.weight
        g2 = self.num_g / self.weight
        valid = g2 > 0 and tr >= 0
        ratio = tr / g2 if valid else float("nan")
        return GnsEstimate(
            tr_noise=tr,
            gnorm2=g2,
            b_precond=ratio,
            scaled_noise=(lr / batch_size) * tr,
            scaled_gnorm2=lr * g2,
            valid=valid,
        )

    def state_dict(self) -> dict:
        return {"halflife": self.halflife, "num_tr": self.num_tr, "num_g": self.num_g, "weight": self.weight}

    def load_state_dict(self, d: dict) -> None:
        self.halflife = float(d["halflife"])
        self.decay = 0.5 ** (1.0 / self.halflife)
        self.num_tr, self.num_g, self.weight = float(d["num_tr"]), float(d["num_g"]), float(d["weight"])


def smooth(raw_stream: Iterable[RawGns], halflife_steps: float = 100.0,
           lrs: Sequence[float] | None = None, batch_sizes: Sequence[int] | None = None) -> list[GnsEstimate]:
    sm = GnsSmoother(halflife_steps)
    out = []
    for i, raw in enumerate(raw_stream):
        lr = lrs[i] if lrs is not None else 0.0
        bs = batch_sizes[i] if batch_sizes is not None else 1
        out.append(sm.update(raw, lr, bs))
    return out


class BatchRegime(str, Enum):
    SMALL = "small"
    LARGE = "large"
    MIXED = "mixed"


def classify_batch_regime(b_precond: Sequence[float], batch_sizes: Sequence[int] | int,
                          valid: Sequence[bool] | None = None) -> BatchRegime:
    """Small if B_precond > B at every valid point, large if below everywhere, else mixed."""
    b_precond = np.asarray(b_precond, dtype=np.float64)
    if np.ndim(batch_sizes) == 0:
        batch_sizes = np.full(b_precond.shape, float(batch_sizes))
    batch_sizes = np.asarray(batch_sizes, dtype=np.float64)
    mask = np.isfinite(b_precond)
    if valid is not None:
        mask &= np.asarray(valid, dtype=bool)
    if not mask.any():
        raise NoValidPointsError("no valid GNS points to classify")
    above = b_precond[mask] > batch_sizes[mask]
    below = b_precond[mask] < batch_sizes[mask]
    if above.all():
        return BatchRegime.SMALL
    if below.all():
        return BatchRegime.LARGE
    return BatchRegime.MIXED


def classify_run(record) -> BatchRegime:
    pts = record.points
    return classify_batch_regime(
        [p.gns_b_precond if p.gns_b_precond is not None else float("nan") for p in pts],
        [p.batch_size for p in pts],
        [bool(p.gns_valid) for p in pts],
    )
