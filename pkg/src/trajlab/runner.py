"""Deterministic training loop, checkpoint resume, run registry and sweeps."""

from __future__ import annotations

import dataclasses
import json
import logging
import math
import os
import shutil
import tempfile
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace
from functools import lru_cache
from pathlib import Path
from typing import Iterable

import numpy as np

from . import checkpoint as ckpt
from .config import ConfigError, TrainConfig, config_hash
from .corpus import (
    MarkovSource,
    StreamState,
    build_source,
    entropy_floor,
    next_batch,
    open_stream,
    validation_set,
)
from .gns import GnsEstimate, GnsSample, GnsSmoother, estimate_step, precond_sqnorm
from .model import NumericFault, ParamSet, backward, expected_loss, forward, init_params
from .optim import AdamState, BsSchedule, adamw_step, batch_size_at, clip_global_norm, lr_at

log = logging.getLogger(__name__)

METRIC_KEYS = (
    "iter", "tokens", "train_loss", "val_loss", "lr", "batch_size", "param_norm",
    "gns_tr_noise", "gns_gnorm2", "gns_b_precond", "gns_valid", "clip_scale",
)
DIVERGENCE_FACTOR = 10.0

COMPLETED = "completed"
DIVERGED = "diverged"


@dataclass
class MetricPoint:
    iter: int
    tokens: int
    train_loss: float
    val_loss: float | None
    lr: float
    batch_size: int
    param_norm: float
    gns_tr_noise: float | None
    gns_gnorm2: float | None
    gns_b_precond: float | None
    gns_valid: bool
    clip_scale: float

    @property
    def scaled_noise(self) -> float | None:
        """``(lr / B) * tr_noise``, the noise level that enters the decay gain."""
        if self.gns_tr_noise is None:
            return None
        return (self.lr / self.batch_size) * self.gns_tr_noise

    @property
    def scaled_gnorm2(self) -> float | None:
        if self.gns_gnorm2 is None:
            return None
        return self.lr * self.gns_gnorm2

    def to_json(self) -> str:
        return json.dumps({k: _jsonable(getattr(self, k)) for k in METRIC_KEYS})

    @classmethod
    def from_json(cls, line: str) -> "MetricPoint":
        d = json.loads(line)
        missing = set(METRIC_KEYS) - set(d)
        if missing:
            raise ValueError(f"metric line missing keys {sorted(missing)}")
        return cls(**{k: d[k] for k in METRIC_KEYS})


def _jsonable(v):
    if isinstance(v, float) and not math.isfinite(v):
        return None
    if isinstance(v, (np.floating,)):
        return _jsonable(float(v))
    if isinstance(v, (np.integer,)):
        return int(v)
    if isinstance(v, np.bool_):
        return bool(v)
    return v


@dataclass
class RunRecord:
    config: TrainConfig
    points: list[MetricPoint] = field(default_factory=list)
    status: str = "running"
    config_hash: str = ""
    note: str = ""

    def __post_init__(self):
        if not self.config_hash:
            self.config_hash = config_hash(self.config)

    def series(self, key: str, require: bool = True) -> tuple[np.ndarray, np.ndarray]:
        """(tokens, values) for one metric, dropping points where it is missing."""
        toks, vals = [], []
        for p in self.points:
            v = getattr(p, key)
            if v is None:
                if require:
                    continue
                v = float("nan")
            toks.append(p.tokens)
            vals.append(float(v))
        return np.asarray(toks, dtype=np.float64), np.asarray(vals, dtype=np.float64)

    def metrics_jsonl(self) -> str:
        return "".join(p.to_json() + "\n" for p in self.points)

    @property
    def final(self) -> MetricPoint | None:
        return self.points[-1] if self.points else None


# ---------------------------------------------------------------------------
# training state
# ---------------------------------------------------------------------------

@lru_cache(maxsize=8)
def _source(seed: int, V: int, order: int, concentration: float, backoff: float) -> MarkovSource:
    return build_source(seed, V, order, concentration, backoff)


@lru_cache(maxsize=4)
def _val_data(seed: int, V: int, order: int, concentration: float, backoff: float, n: int, k: int):
    src = _source(seed, V, order, concentration, backoff)
    batch = validation_set(src, n, k, seed)
    probs = src.table[batch.contexts]
    with np.errstate(divide="ignore", invalid="ignore"):
        plogp = np.where(probs > 0, probs * np.log(probs), 0.0)
    # population floor minus the sample's own mean entropy
    offset = entropy_floor(src) + float(plogp.sum(axis=1).mean())
    return batch.inputs, probs, offset


def source_for(config: TrainConfig) -> MarkovSource:
    d = config.data
    return _source(d.seed, config.model.vocab_size, d.order, d.concentration, d.backoff)


def validation_data(config: TrainConfig):
    """Fixed held-out windows, their exact next-token distributions and an entropy offset.

    Depends only on the data settings, so every run in a sweep sees the same set.
    """
    d = config.data
    return _val_data(d.seed, config.model.vocab_size, d.order, d.concentration, d.backoff, d.val_examples,
                     config.model.context_k)


def validation_loss(params: ParamSet, config: TrainConfig) -> float:
    """Entropy floor plus the mean KL divergence from the true next-token distributions.

    Equal in expectation to the held-out cross-entropy, but the entropy part is
    exact rather than sampled, so the value can never drop below the floor.
    """
    inputs, probs, offset = validation_data(config)
    return expected_loss(params, inputs, probs) + offset


class Diverged(RuntimeError):
    pass


@dataclass
class TrainState:
    config: TrainConfig
    params: ParamSet
    adam: AdamState
    stream: StreamState
    smoother: GnsSmoother
    tokens: int = 0
    iteration: int = 0
    tau: float = 0.0  # sum of per-step learning rates
    initial_loss: float | None = None

    @classmethod
    def fresh(cls, config: TrainConfig) -> "TrainState":
        params = init_params(config.model, config.run_seed)
        return cls(
            config=config,
            params=params,
            adam=AdamState.fresh(params),
            stream=open_stream(source_for(config), config.data.seed),
            smoother=GnsSmoother(config.gns.halflife_steps),
        )

    # -- checkpoint io ------------------------------------------------------

    def save(self, path) -> Path:
        tensors = {}
        for prefix, ps in (("param", self.params), ("adam_m", self.adam.m), ("adam_v", self.adam.v)):
            for name, arr in ps.items():
                tensors[f"{prefix}/{name}"] = arr
        meta = {
            "config": self.config.to_dict(),
            "config_hash": config_hash(self.config),
            "adam_t": self.adam.t,
            "tokens": self.tokens,
            "iteration": self.iteration,
            "tau": self.tau,
            "initial_loss": self.initial_loss,
            "stream": self.stream.snapshot(),
            "gns": self.smoother.state_dict(),
        }
        return ckpt.save(path, tensors, meta)

    @classmethod
    def load(cls, path, config: TrainConfig | None = None) -> "TrainState":
        tensors, meta = ckpt.load(path)
        saved = TrainConfig.from_dict(meta["config"])
        config = config or saved
        shapes = config.model.shapes()

        def group(prefix):
            out = {}
            for name, shape in shapes.items():
                key = f"{prefix}/{name}"
                if key not in tensors:
                    raise ckpt.CheckpointError(f"checkpoint lacks tensor {key}")
                if tensors[key].shape != shape:
                    raise ckpt.CheckpointError(f"{key}: checkpoint shape {tensors[key].shape} != config {shape}")
                out[name] = tensors[key].copy()
            return ParamSet(config.model, out)

        params = group("param")
        adam = AdamState(group("adam_m"), group("adam_v"), int(meta["adam_t"]))
        smoother = GnsSmoother(config.gns.halflife_steps)
        smoother.load_state_dict(meta["gns"])
        return cls(
            config=config,
            params=params,
            adam=adam,
            stream=StreamState.restore(meta["stream"]),
            smoother=smoother,
            tokens=int(meta["tokens"]),
            iteration=int(meta["iteration"]),
            tau=float(meta["tau"]),
            initial_loss=meta["initial_loss"],
        )


def _step(state: TrainState, source: MarkovSource) -> tuple[float, float, float, int, GnsEstimate]:
    cfg = state.config
    B = min(batch_size_at(cfg.bs_schedule, state.tokens), cfg.total_tokens - state.tokens)
    lr = lr_at(cfg.lr_schedule, state.tokens, cfg.optim.peak_lr)
    batch = next_batch(source, B, cfg.model.context_k, state.stream)

    loss, cache = forward(state.params, batch.inputs, batch.targets)
    grads = backward(state.params, cache)

    if cfg.gns.enabled and state.iteration % cfg.gns.every_steps == 0:
        # preconditioner snapshot is taken before this step's moment update
        vhat = state.adam.vhat(cfg.optim.beta2)
        b_small = B // cfg.gns.micro_div
        if vhat is not None and 0 < b_small < B:
            _, mcache = forward(state.params, batch.inputs[:b_small], batch.targets[:b_small])
            micro = backward(state.params, mcache)
            eps = cfg.optim.adam_eps
            sample = GnsSample(b_small, B, precond_sqnorm(micro, vhat, eps), precond_sqnorm(grads, vhat, eps))
            state.smoother.update(estimate_step(sample))
    gns = state.smoother.current(lr, B)

    grads, scale = clip_global_norm(grads, cfg.optim.clip_norm)
    adamw_step(state.params, grads, state.adam, lr, cfg.optim)
    state.tokens += B
    state.iteration += 1
    state.tau += lr
    return loss, lr, scale, B, gns


def run_loop(state: TrainState, record: RunRecord, stop_tokens: int | None = None,
             checkpoint_dir: Path | None = None) -> RunRecord:
    """Advance ``state`` to ``stop_tokens`` (default: the configured total), appending to ``record``."""
    cfg = state.config
    stop = cfg.total_tokens if stop_tokens is None else min(stop_tokens, cfg.total_tokens)
    source = source_for(cfg)
    every_eval = cfg.eval_every_tokens
    every_ckpt = cfg.checkpoint_every_tokens
    record.status = "running"
    try:
        while state.tokens < stop:
            before = state.tokens
            loss, lr, scale, B, gns = _step(state, source)
            if not math.isfinite(loss):
                raise NumericFault("loss")
            if state.initial_loss is None:
                state.initial_loss = loss
            if loss > DIVERGENCE_FACTOR * state.initial_loss:
                raise Diverged(f"train loss {loss:.4g} exceeds {DIVERGENCE_FACTOR}x initial {state.initial_loss:.4g}")

            crossed_eval = state.tokens // every_eval > before // every_eval
            final = state.tokens >= cfg.total_tokens
            if crossed_eval or final or state.iteration % cfg.log_every_steps == 0:
                val = validation_loss(state.params, cfg) if (crossed_eval or final) else None
                if val is not None and not math.isfinite(val):
                    raise NumericFault("validation loss")
                record.points.append(MetricPoint(
                    iter=state.iteration,
                    tokens=state.tokens,
                    train_loss=loss,
                    val_loss=val,
                    lr=lr,
                    batch_size=B,
                    param_norm=decayed_norm(state.params, cfg.optim),
                    gns_tr_noise=_opt(gns.tr_noise),
                    gns_gnorm2=_opt(gns.gnorm2),
                    gns_b_precond=_opt(gns.b_precond),
                    gns_valid=bool(gns.valid),
                    clip_scale=scale,
                ))
            if checkpoint_dir is not None and every_ckpt and state.tokens // every_ckpt > before // every_ckpt:
                state.save(checkpoint_dir / f"ckpt_{state.tokens:012d}.tjl")
    except (NumericFault, Diverged, FloatingPointError) as e:
        log.warning("run %s diverged at iter %d: %s", record.config_hash, state.iteration, e)
        record.status = DIVERGED
        record.note = str(e)
        return record
    if state.tokens >= cfg.total_tokens:
        record.status = COMPLETED
        if checkpoint_dir is not None:
            state.save(checkpoint_dir / "final.tjl")
    return record


def decayed_norm(params: ParamSet, optim) -> float:
    """L2 norm over the tensors weight decay acts on.

    Undecayed RMSNorm gains are left out: they drift freely to compensate for
    the shrinking decayed weights and would mask the norm equilibrium.
    """
    total = sum(float(np.sum(arr * arr)) for name, arr in params.items() if optim.decays(name))
    return math.sqrt(total)


def _opt(x: float) -> float | None:
    return x if math.isfinite(x) else None


def train(config: TrainConfig, checkpoint_dir: str | os.PathLike | None = None,
          stop_tokens: int | None = None) -> RunRecord:
    """Train from initialization. ``stop_tokens`` ends early (for checkpoint tests)."""
    state = TrainState.fresh(config)
    record = RunRecord(config)
    cdir = Path(checkpoint_dir) if checkpoint_dir is not None else None
    run_loop(state, record, stop_tokens, cdir)
    if stop_tokens is not None and cdir is not None and record.status == "running":
        state.save(cdir / f"ckpt_{state.tokens:012d}.tjl")
    return record


RESUME_KEYS = {"peak_lr", "weight_decay", "bs_schedule", "extra_tokens", "model", "log_every_steps",
               "eval_every_tokens"}


def resumed_config(source: TrainConfig, at_tokens: int, overrides: dict | None, source_hash: str) -> TrainConfig:
    """Configuration of a run continued from ``source`` at ``at_tokens`` with ``overrides`` applied."""
    overrides = dict(overrides or {})
    unknown = set(overrides) - RESUME_KEYS
    if unknown:
        raise ConfigError(f"unsupported resume overrides {sorted(unknown)}")
    if not overrides:
        return source
    cfg = source.with_hparams(overrides.get("peak_lr"), overrides.get("weight_decay"))
    if "bs_schedule" in overrides:
        bs = overrides["bs_schedule"]
        cfg = replace(cfg, bs_schedule=bs if isinstance(bs, BsSchedule) else BsSchedule(**bs))
    if "model" in overrides:
        m = overrides["model"]
        cfg = replace(cfg, model=m if not isinstance(m, dict) else type(cfg.model)(**m))
    for key in ("log_every_steps", "eval_every_tokens"):
        if key in overrides:
            cfg = replace(cfg, **{key: int(overrides[key])})
    if overrides.get("extra_tokens") is not None:
        total = at_tokens + int(overrides["extra_tokens"])
        cfg = replace(cfg, lr_schedule=replace(cfg.lr_schedule, total_tokens=total))
    prov = {k: (dataclasses.asdict(v) if dataclasses.is_dataclass(v) else v) for k, v in overrides.items()}
    return replace(cfg, resume={"source": source_hash, "tokens": at_tokens, "overrides": prov})


def resume(checkpoint_path, overrides: dict | None = None,
           checkpoint_dir: str | os.PathLike | None = None) -> RunRecord:
    """Continue a run from a checkpoint; the record holds only the continuation.

    Learning-rate overrides apply immediately (no second warmup): the schedule
    is keyed on tokens and the checkpoint is already past warmup.
    """
    tensors, meta = ckpt.load(checkpoint_path)  # integrity check before anything else
    source_cfg = TrainConfig.from_dict(meta["config"])
    cfg = resumed_config(source_cfg, int(meta["tokens"]), overrides, meta["config_hash"])
    state = TrainState.load(checkpoint_path, cfg)
    record = RunRecord(cfg)
    run_loop(state, record, None, Path(checkpoint_dir) if checkpoint_dir is not None else None)
    return record


# ---------------------------------------------------------------------------
# registry
# ---------------------------------------------------------------------------

class MissingRunsError(LookupError):
    def __init__(self, hashes: Iterable[str]):
        self.hashes = sorted(hashes)
        super().__init__("missing runs: " + ", ".join(self.hashes))


class Registry:
    """Directory of run folders named by config hash.

    A folder holds ``config.json``, ``metrics.jsonl``, ``status.json`` and
    ``checkpoints/``. Runs are built in a scratch folder and renamed into place,
    so a folder that exists is always complete.
    """

    def __init__(self, root: str | os.PathLike):
        self.root = Path(root)
        self.root.mkdir(parents=True, exist_ok=True)

    def path(self, h: str) -> Path:
        return self.root / h

    def has(self, h: str) -> bool:
        return (self.path(h) / "status.json").is_file()

    def hashes(self) -> list[str]:
        return sorted(p.name for p in self.root.iterdir() if p.is_dir() and (p / "status.json").is_file())

    def scratch(self, h: str) -> Path:
        return Path(tempfile.mkdtemp(prefix=f".tmp-{h}-", dir=self.root))

    def commit(self, record: RunRecord, scratch: Path) -> Path:
        (scratch / "config.json").write_text(record.config.to_json())
        (scratch / "metrics.jsonl").write_text(record.metrics_jsonl())
        status = {"config_hash": record.config_hash, "status": record.status, "note": record.note,
                  "points": len(record.points)}
        (scratch / "status.json").write_text(json.dumps(status, indent=2))
        dest = self.path(record.config_hash)
        if dest.exists():
            # completed folders are never overwritten
            shutil.rmtree(scratch)
            return dest
        os.replace(scratch, dest)
        return dest

    def load(self, h: str) -> RunRecord:
        p = self.path(h)
        if not self.has(h):
            raise MissingRunsError([h])
        cfg = TrainConfig.from_json((p / "config.json").read_text())
        status = json.loads((p / "status.json").read_text())
        points = [MetricPoint.from_json(line) for line in (p / "metrics.jsonl").read_text().splitlines() if line]
        return RunRecord(cfg, points, status["status"], status["config_hash"], status.get("note", ""))

    def load_many(self, hashes: Iterable[str] | None = None) -> list[RunRecord]:
        hashes = self.hashes() if hashes is None else list(hashes)
        missing = [h for h in hashes if not self.has(h)]
        if missing:
            raise MissingRunsError(missing)
        return [self.load(h) for h in hashes]

    def checkpoint(self, h: str, tokens: int | None = None) -> Path:
        cdir = self.path(h) / "checkpoints"
        if tokens is None:
            return cdir / "final.tjl"
        return cdir / f"ckpt_{tokens:012d}.tjl"


def train_into(registry: Registry, config: TrainConfig, extra_checkpoints: Iterable[int] = ()) -> RunRecord:
    """Train one config into the registry (no-op returning the stored record if present)."""
    h = config_hash(config)
    if registry.has(h):
        return registry.load(h)
    scratch = registry.scratch(h)
    cdir = scratch / "checkpoints"
    state = TrainState.fresh(config)
    record = RunRecord(config)
    for stop in sorted(set(int(t) for t in extra_checkpoints)):
        run_loop(state, record, stop, cdir)
        if record.status != "running":
            break
        state.save(cdir / f"ckpt_{state.tokens:012d}.tjl")
    if record.status == "running":
        run_loop(state, record, None, cdir)
    registry.commit(record, scratch)
    return record


def resume_into(registry: Registry, checkpoint_path, overrides: dict | None) -> RunRecord:
    tensors, meta = ckpt.load(checkpoint_path)
    cfg = resumed_config(TrainConfig.from_dict(meta["config"]), int(meta["tokens"]), overrides, meta["config_hash"])
    h = config_hash(cfg)
    if registry.has(h):
        return registry.load(h)
    scratch = registry.scratch(h)
    record = resume(checkpoint_path, overrides, scratch / "checkpoints")
    registry.commit(record, scratch)
    return record


# ---------------------------------------------------------------------------
# sweeps
# ---------------------------------------------------------------------------

@dataclass
class ResumeSpec:
    """Type 1 batch-size scheduling: every cell resumes one source checkpoint."""

    source: TrainConfig
    at_tokens: int
    bs_schedule: BsSchedule | None = None
    extra_tokens: int | None = None


@dataclass
class SweepSpec:
    base: TrainConfig
    etas: list[float] = field(default_factory=list)
    lambdas: list[float] = field(default_factory=list)
    pairs: list[tuple[float, float]] | None = None  # explicit (eta, lambda) cells instead of the grid
    resume_from: ResumeSpec | None = None

    def __post_init__(self):
        if self.pairs is None and (not self.etas or not self.lambdas):
            raise ConfigError("sweep needs non-empty eta and lambda grids (or explicit pairs)")

    def cells(self) -> list[tuple[float, float]]:
        if self.pairs is not None:
            return [(float(e), float(l)) for e, l in self.pairs]
        return [(float(e), float(l)) for e in self.etas for l in self.lambdas]

    @classmethod
    def from_dict(cls, d: dict) -> "SweepSpec":
        d = dict(d)
        unknown = set(d) - {"base", "etas", "lambdas", "pairs", "resume_from"}
        if unknown:
            raise ConfigError(f"unknown sweep keys {sorted(unknown)}")
        rf = d.get("resume_from")
        if rf is not None:
            rf = ResumeSpec(
                source=TrainConfig.from_dict(rf["source"]),
                at_tokens=int(rf["at_tokens"]),
                bs_schedule=BsSchedule(**rf["bs_schedule"]) if rf.get("bs_schedule") else None,
                extra_tokens=rf.get("extra_tokens"),
            )
        pairs = d.get("pairs")
        return cls(
            base=TrainConfig.from_dict(d["base"]),
            etas=list(d.get("etas") or []),
            lambdas=list(d.get("lambdas") or []),
            pairs=[tuple(p) for p in pairs] if pairs is not None else None,
            resume_from=rf,
        )

    def to_dict(self) -> dict:
        out = {"base": self.base.to_dict(), "etas": self.etas, "lambdas": self.lambdas}
        if self.pairs is not None:
            out["pairs"] = [list(p) for p in self.pairs]
        if self.resume_from is not None:
            r = self.resume_from
            out["resume_from"] = {
                "source": r.source.to_dict(),
                "at_tokens": r.at_tokens,
                "bs_schedule": dataclasses.asdict(r.bs_schedule) if r.bs_schedule else None,
                "extra_tokens": r.extra_tokens,
            }
        return out


@dataclass
class SweepResult:
    records: dict[str, RunRecord]
    executed: list[str]
    skipped: list[str]
    source_hash: str | None = None


def _cell_job(args):
    kind, root, payload = args
    reg = Registry(root)
    if kind == "train":
        rec = train_into(reg, TrainConfig.from_dict(payload))
    else:
        path, overrides = payload
        rec = resume_into(reg, path, overrides)
    return rec.config_hash, rec.status


def sweep_jobs(spec: SweepSpec, registry: Registry) -> tuple[list[tuple[str, tuple]], str | None]:
    """(hash, job) per cell; trains the Type 1 source checkpoint first if needed."""
    jobs = []
    source_hash = None
    if spec.resume_from is None:
        for eta, lam in spec.cells():
            cfg = spec.base.with_hparams(eta, lam)
            jobs.append((config_hash(cfg), ("train", str(registry.root), cfg.to_dict())))
        return jobs, None
    rf = spec.resume_from
    src = train_into(registry, rf.source, extra_checkpoints=[rf.at_tokens])
    source_hash = src.config_hash
    path = registry.checkpoint(source_hash, rf.at_tokens)
    _, meta = ckpt.load(path)
    for eta, lam in spec.cells():
        ov = {"peak_lr": eta, "weight_decay": lam}
        if rf.bs_schedule is not None:
            ov["bs_schedule"] = dataclasses.asdict(rf.bs_schedule)
        if rf.extra_tokens is not None:
            ov["extra_tokens"] = rf.extra_tokens
        cfg = resumed_config(TrainConfig.from_dict(meta["config"]), int(meta["tokens"]), ov, meta["config_hash"])
        jobs.append((config_hash(cfg), ("resume", str(registry.root), (str(path), ov))))
    return jobs, source_hash


def run_sweep(spec: SweepSpec, registry: Registry, workers: int = 1) -> SweepResult:
    """One run per cell, skipping cells whose hash is already in the registry.

    Cells are independent processes when ``workers > 1``; each run is
    single-threaded and deterministic, so the per-run logs do not depend on
    how the sweep is scheduled. A diverged cell is recorded, not raised.
    """
    jobs, source_hash = sweep_jobs(spec, registry)
    todo = [(h, job) for h, job in jobs if not registry.has(h)]
    skipped = [h for h, _ in jobs if registry.has(h)]
    if workers > 1 and len(todo) > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            list(pool.map(_cell_job, [job for _, job in todo]))
    else:
        for _, job in todo:
            _cell_job(job)
    hashes = [h for h, _ in jobs]
    return SweepResult(
        records={h: registry.load(h) for h in hashes},
        executed=[h for h, _ in todo],
        skipped=skipped,
        source_hash=source_hash,
    )
