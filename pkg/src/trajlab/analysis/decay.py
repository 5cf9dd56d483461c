"""Predicting the loss after learning-rate decay from a constant-LR run's gradient noise.

At gradient-flow time ``tau`` (the running sum of per-step learning rates)
the decayed loss is predicted as ``L - (lr / B) * tr_noise / 4``, using the
constant run's loss and preconditioned noise trace at the same ``tau``.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np

from ..optim import batch_size_at, lr_at

TAU_RTOL = 0.01


class PredictionRefused(ValueError):
    pass


def decayed_loss(loss: float, lr: float, batch_size: float, tr_noise: float) -> float:
    return loss - 0.25 * (lr / batch_size) * tr_noise


def tau_series(record) -> np.ndarray:
    """Gradient-flow time at each logged point, replayed from the run's schedules.

    The replay reproduces the loop exactly: one learning rate per step, read
    at the token count before the step.
    """
    cfg = record.config
    if cfg.resume is not None:
        raise PredictionRefused("gradient-flow time of a resumed run depends on its source run")
    want = {p.iter for p in record.points}
    last = max(want, default=0)
    out = {}
    tokens, tau = 0, 0.0
    for it in range(1, last + 1):
        B = min(batch_size_at(cfg.bs_schedule, tokens), cfg.total_tokens - tokens)
        tau += lr_at(cfg.lr_schedule, tokens, cfg.eta)
        tokens += B
        if it in want:
            out[it] = tau
    return np.array([out[p.iter] for p in record.points])


@dataclass
class DecayPrediction:
    tau: float
    matched_tau: float
    tokens: int
    loss: float
    lr: float
    batch_size: int
    tr_noise: float
    predicted: float
    actual: float | None = None
    actual_tau: float | None = None
    rel_error: float | None = None

    def to_dict(self) -> dict:
        return asdict(self)


def _nearest(taus: np.ndarray, candidates: np.ndarray, target: float) -> int:
    idx = np.flatnonzero(candidates)
    if idx.size == 0:
        raise PredictionRefused("no evaluated points")
    i = int(idx[np.argmin(np.abs(taus[idx] - target))])
    if abs(taus[i] - target) > TAU_RTOL * abs(target):
        raise PredictionRefused(f"no logged point within {TAU_RTOL:.0%} of tau={target:.6g} (nearest {taus[i]:.6g})")
    return i


def predict_decay_gain(const_run, tau: float, wsd_run=None) -> DecayPrediction:
    """Predicted decayed loss at ``tau``; with ``wsd_run`` also the relative error.

    The constant run must use a constant schedule. Points without a validation
    loss are not candidates; a matched point with invalid noise is refused.
    """
    if const_run.config.lr_schedule.kind != "constant":
        raise PredictionRefused("prediction needs a constant learning-rate run")
    taus = tau_series(const_run)
    has_val = np.array([p.val_loss is not None for p in const_run.points])
    i = _nearest(taus, has_val, tau)
    p = const_run.points[i]
    if not p.gns_valid or p.gns_tr_noise is None:
        raise PredictionRefused(f"gradient noise estimate invalid at tau={taus[i]:.6g}")
    pred = decayed_loss(p.val_loss, p.lr, p.batch_size, p.gns_tr_noise)
    out = DecayPrediction(float(tau), float(taus[i]), p.tokens, p.val_loss, p.lr, p.batch_size, p.gns_tr_noise, pred)
    if wsd_run is not None:
        wt = tau_series(wsd_run)
        w_has = np.array([q.val_loss is not None for q in wsd_run.points])
        j = _nearest(wt, w_has, tau)
        actual = wsd_run.points[j].val_loss
        out.actual = actual
        out.actual_tau = float(wt[j])
        out.rel_error = abs(actual - pred) / abs(actual)
    return out


def decay_report(const_run, wsd_runs) -> list[dict]:
    """One prediction per decayed run, matched at that run's final gradient-flow time."""
    rows = []
    for w in wsd_runs:
        tau = float(tau_series(w)[-1])
        try:
            rows.append({"wsd_hash": w.config_hash, **predict_decay_gain(const_run, tau, w).to_dict()})
        except PredictionRefused as e:
            rows.append({"wsd_hash": w.config_hash, "tau": tau, "refused": str(e)})
    if not wsd_runs:
        taus = tau_series(const_run)
        for p, t in zip(const_run.points, taus):
            if p.val_loss is None:
                continue
            try:
                rows.append(predict_decay_gain(const_run, float(t)).to_dict())
            except PredictionRefused as e:
                rows.append({"tau": float(t), "refused": str(e)})
    return rows

