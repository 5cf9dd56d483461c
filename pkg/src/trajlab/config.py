"""Run configuration: nested frozen dataclasses with a canonical JSON hash."""

from __future__ import annotations

import dataclasses
import hashlib
import json
from dataclasses import dataclass, field, replace
from typing import Any

from .model import ModelConfig
from .optim import BsSchedule, LrSchedule, OptimConfig


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class DataConfig:
    """Markov source parameters; the vocabulary size comes from the model config."""

    seed: int = 1234
    order: int = 2
    concentration: float = 0.3
    val_examples: int = 2**15
    backoff: float = 0.0  # 0: independent symmetric rows; see corpus.build_source


@dataclass(frozen=True)
class GnsConfig:
    enabled: bool = True
    micro_div: int = 8  # micro-batch is B // micro_div examples of the training batch
    halflife_steps: float = 100.0
    every_steps: int = 1


@dataclass(frozen=True)
class TrainConfig:
    model: ModelConfig
    optim: OptimConfig
    lr_schedule: LrSchedule
    bs_schedule: BsSchedule = field(default_factory=lambda: BsSchedule.fixed(32))
    data: DataConfig = field(default_factory=DataConfig)
    gns: GnsConfig = field(default_factory=GnsConfig)
    eval_every_tokens: int = 6400
    log_every_steps: int = 50
    checkpoint_every_tokens: int = 0  # 0: only the final checkpoint
    run_seed: int = 0
    # provenance for resumed runs: {"source": hash, "tokens": n, "overrides": {...}}
    resume: dict | None = None

    def __post_init__(self):
        if self.lr_schedule.warmup_tokens >= self.total_tokens:
            raise ConfigError(
                f"total_tokens ({self.total_tokens}) must exceed warmup_tokens ({self.lr_schedule.warmup_tokens})"
            )
        if self.eval_every_tokens <= 0 or self.log_every_steps <= 0:
            raise ConfigError("eval_every_tokens and log_every_steps must be positive")
        if self.checkpoint_every_tokens < 0:
            raise ConfigError("checkpoint_every_tokens must be >= 0")
        if self.data.order > self.model.context_k:
            # the chain context must fit in the model window for the floor to be reachable
            raise ConfigError(f"chain order {self.data.order} exceeds context_k {self.model.context_k}")

    def __hash__(self):
        return hash(config_hash(self))

    @property
    def total_tokens(self) -> int:
        return self.lr_schedule.total_tokens

    @property
    def eta(self) -> float:
        return self.optim.peak_lr

    @property
    def lam(self) -> float:
        return self.optim.weight_decay

    @property
    def gamma(self) -> float:
        return self.optim.elr

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    def to_json(self, indent: int | None = 2) -> str:
        return json.dumps(self.to_dict(), indent=indent, sort_keys=True)

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        d = dict(d)
        try:
            return cls(
                model=_build(ModelConfig, d.pop("model")),
                optim=_build(OptimConfig, d.pop("optim")),
                lr_schedule=_build(LrSchedule, d.pop("lr_schedule")),
                bs_schedule=_build(BsSchedule, d.pop("bs_schedule", {"kind": "fixed", "batch_size": 32})),
                data=_build(DataConfig, d.pop("data", {})),
                gns=_build(GnsConfig, d.pop("gns", {})),
                **_check_keys(cls, d),
            )
        except KeyError as e:
            raise ConfigError(f"missing config section {e}") from None
        except TypeError as e:
            raise ConfigError(str(e)) from None

    @classmethod
    def from_json(cls, text: str) -> "TrainConfig":
        return cls.from_dict(json.loads(text))

    def config_hash(self) -> str:
        return config_hash(self)

    def with_hparams(self, eta: float | None = None, lam: float | None = None) -> "TrainConfig":
        optim = self.optim
        if eta is not None:
            optim = replace(optim, peak_lr=float(eta))
        if lam is not None:
            optim = replace(optim, weight_decay=float(lam))
        return replace(self, optim=optim)


def config_hash(config: TrainConfig) -> str:
    canon = json.dumps(config.to_dict(), sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(canon.encode()).hexdigest()[:16]


def _check_keys(cls, d: dict) -> dict:
    names = {f.name for f in dataclasses.fields(cls)}
    unknown = set(d) - names
    if unknown:
        raise ConfigError(f"unknown {cls.__name__} keys: {sorted(unknown)}")
    return d


def _build(cls, d: Any):
    if isinstance(d, cls):
        return d
    if not isinstance(d, dict):
        raise ConfigError(f"{cls.__name__} section must be an object")
    return cls(**_check_keys(cls, dict(d)))


# ---------------------------------------------------------------------------
# templates
# ---------------------------------------------------------------------------

DESK_MODEL = ModelConfig(vocab_size=64, context_k=4, embed_dim=48, num_blocks=2)
DESK_SMALL_B = 32
DESK_LARGE_B = 512
DESK_TOKENS = DESK_SMALL_B * 20_000
DESK_WARMUP = DESK_SMALL_B * 500
# order-2 rows scattered around order-1 rows: a symmetric random table gives a
# k-gram MLP no first-order signal, and the desk model then never leaves ln V
DESK_DATA = DataConfig(backoff=10.0)


def desk_config(**overrides) -> TrainConfig:
    """Default desk-scale run: ~52k-parameter model, V=64 order-2 chain, small batch."""
    base = TrainConfig(
        model=DESK_MODEL,
        data=DESK_DATA,
        optim=OptimConfig(peak_lr=2.0**-8, weight_decay=0.1),
        lr_schedule=LrSchedule(kind="constant", total_tokens=DESK_TOKENS, warmup_tokens=DESK_WARMUP),
        bs_schedule=BsSchedule.fixed(DESK_SMALL_B),
        eval_every_tokens=DESK_SMALL_B * 200,
        log_every_steps=50,
    )
    return replace(base, **overrides)


def _desk_small() -> TrainConfig:
    return desk_config()


def _desk_large_batch() -> TrainConfig:
    return desk_config(bs_schedule=BsSchedule.fixed(DESK_LARGE_B), eval_every_tokens=DESK_LARGE_B * 20,
                       log_every_steps=5)


def _desk_bss_type2() -> TrainConfig:
    return desk_config(bs_schedule=BsSchedule.type2(DESK_SMALL_B, DESK_LARGE_B, int(DESK_TOKENS * 0.3)))


def _desk_wsd() -> TrainConfig:
    return desk_config(lr_schedule=LrSchedule(kind="wsd", total_tokens=DESK_TOKENS, warmup_tokens=DESK_WARMUP,
                                              decay_tokens=DESK_TOKENS // 20))


DESK_ETAS = [2.0**-10, 2.0**-9, 2.0**-8, 2.0**-7, 2.0**-6]
DESK_LAMBDAS = [0.025, 0.05, 0.1, 0.2, 0.4]


def _desk_bss_type1() -> dict:
    source_tokens = int(DESK_TOKENS * 0.1)
    return {
        "base": _desk_large_batch().to_dict(),
        "etas": DESK_ETAS,
        "lambdas": DESK_LAMBDAS,
        "resume_from": {
            "source": desk_config(optim=OptimConfig(peak_lr=2.0**-8, weight_decay=0.1)).to_dict(),
            "at_tokens": source_tokens,
            "bs_schedule": dataclasses.asdict(BsSchedule.fixed(DESK_LARGE_B)),
            "extra_tokens": DESK_TOKENS - source_tokens,
        },
    }


TEMPLATES = {
    "desk-small": _desk_small,
    "desk-large-batch": _desk_large_batch,
    "desk-bss-type1": _desk_bss_type1,
    "desk-bss-type2": _desk_bss_type2,
    "desk-wsd": _desk_wsd,
}


def template(name: str, sweep: bool = False) -> dict:
    """Fully populated config (or sweep spec) for a named template, as a plain dict.

    ``desk-bss-type1`` is always a sweep spec: the type 1 scheduler only exists
    as resumes of one shared small-batch checkpoint.
    """
    if name not in TEMPLATES:
        raise ConfigError(f"unknown template {name!r}; choose from {', '.join(TEMPLATES)}")
    out = TEMPLATES[name]()
    if isinstance(out, TrainConfig):
        if sweep:
            return {"base": out.to_dict(), "etas": DESK_ETAS, "lambdas": DESK_LAMBDAS}
        return out.to_dict()
    return out
