"""Power-law, paraboloid and scaling-law fits over sweep results.

Offset power laws ``y = c + a * x**p`` are fitted by scanning the offset ``c``
on a grid below ``min(y)``, solving the log-linear problem
``ln(y - c) = ln a + p ln x`` at every level, and refining the best level by
golden-section search. The scan makes the fit independent of any starting
guess.
"""

from __future__ import annotations

import logging
import math
import warnings
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from ..numkit import DegenerateFitError, eigen_sym2, solve_least_squares

log = logging.getLogger(__name__)

GRID_LEVELS = 200
MIN_RUN_POINTS = 20
MIN_ELR_LEVELS = 4
MIN_BUDGETS = 4
MIN_CELLS = 6


class InsufficientDataError(ValueError):
    pass


@dataclass
class PowerLawFit:
    """Named coefficients plus goodness of fit.

    ``params`` keys depend on the law: (L0, A, alpha) for a run, (L01, L02, L03)
    for the irreducible-loss law, (G1, G2) for gradient noise, (coef, exponent)
    for optimum scaling and (E, B, beta) for loss scaling.
    """

    kind: str
    params: dict[str, float]
    r2: float
    degenerate: bool = False
    n_points: int = 0
    notes: list[str] = field(default_factory=list)

    def __getitem__(self, name: str) -> float:
        return self.params[name]

    def to_dict(self) -> dict:
        return {"kind": self.kind, "params": self.params, "r2": self.r2, "degenerate": self.degenerate,
                "n_points": self.n_points, "notes": self.notes}


def r_squared(y: np.ndarray, yhat: np.ndarray) -> float:
    ss_res = float(np.sum((y - yhat) ** 2))
    ss_tot = float(np.sum((y - np.mean(y)) ** 2))
    tiny = 1e-24 * max(1.0, float(np.sum(y * y)))
    if ss_tot <= tiny:
        # constant target: a perfect fit explains everything there is
        return 1.0 if ss_res <= tiny else 0.0
    return 1.0 - ss_res / ss_tot


def loglog_fit(x, y) -> tuple[float, float, float]:
    """Fit ``y = coef * x**exponent`` by linear regression in log space.

    Returns (coef, exponent, R^2 of the log-space fit).
    """
    lx = np.log(np.asarray(x, dtype=np.float64))
    ly = np.log(np.asarray(y, dtype=np.float64))
    A = np.column_stack([np.ones_like(lx), lx])
    res = solve_least_squares(A, ly)
    icpt, slope = res.x
    return float(math.exp(icpt)), float(slope), r_squared(ly, A @ res.x)


def golden_section(f: Callable[[float], float], lo: float, hi: float, tol: float = 1e-12,
                   max_iter: int = 200) -> float:
    """Minimizer of a unimodal ``f`` on [lo, hi]."""
    inv_phi = (math.sqrt(5.0) - 1.0) / 2.0
    a, b = lo, hi
    c = b - inv_phi * (b - a)
    d = a + inv_phi * (b - a)
    fc, fd = f(c), f(d)
    for _ in range(max_iter):
        if abs(b - a) <= tol * max(1.0, abs(a) + abs(b)):
            break
        if fc < fd:
            b, d, fd = d, c, fc
            c = b - inv_phi * (b - a)
            fc = f(c)
        else:
            a, c, fc = c, d, fd
            d = a + inv_phi * (b - a)
            fd = f(d)
    return (a + b) / 2.0


def _offset_loss(x, y, c):
    """(SSE in y-space, coef, exponent) for a given offset, or inf if infeasible."""
    r = y - c
    if np.any(r <= 0):
        return math.inf, math.nan, math.nan
    lx, lr = np.log(x), np.log(r)
    A = np.column_stack([np.ones_like(lx), lx])
    try:
        sol = solve_least_squares(A, lr).x
    except DegenerateFitError:
        return math.inf, math.nan, math.nan
    coef, expo = math.exp(sol[0]), sol[1]
    yhat = c + coef * x**expo
    return float(np.sum((y - yhat) ** 2)), coef, float(expo)


def fit_offset_power_law(x, y, levels: int = GRID_LEVELS) -> tuple[float, float, float, float]:
    """Fit ``y = c + a * x**p`` with c in [0, min(y)); returns (c, a, p, R^2).

    Levels are scored by residuals of y itself, not of the log transform, so
    the selected offset minimizes the error in the units of the data.
    """
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    ymin = float(np.min(y))
    if ymin <= 0:
        raise ValueError("offset power-law fit needs positive data")
    grid = ymin * np.arange(levels) / levels
    sse = np.array([_offset_loss(x, y, c)[0] for c in grid])
    best = int(np.argmin(sse))
    lo = grid[max(best - 1, 0)]
    hi = grid[best + 1] if best + 1 < levels else ymin * (1.0 - 1e-9)
    c = golden_section(lambda v: _offset_loss(x, y, v)[0], lo, hi)
    if _offset_loss(x, y, c)[0] > sse[best]:
        c = grid[best]
    _, coef, expo = _offset_loss(x, y, c)
    return float(c), float(coef), float(expo), r_squared(y, c + coef * x**expo)


# ---------------------------------------------------------------------------
# loss-curve laws
# ---------------------------------------------------------------------------

def fit_run_power_law(tokens_or_steps, loss, eta: float) -> PowerLawFit:
    """``L(t) = L0 + A * (eta * t)**(-alpha)`` on a constant-LR curve segment.

    ``tokens_or_steps`` is the iteration count t. A curve that does not
    decrease is flagged degenerate with ``A = 0`` and ``L0`` the mean loss.
    """
    t = np.asarray(tokens_or_steps, dtype=np.float64)
    y = np.asarray(loss, dtype=np.float64)
    keep = np.isfinite(y) & (t > 0)
    t, y = t[keep], y[keep]
    if t.size < MIN_RUN_POINTS:
        raise InsufficientDataError(f"need >= {MIN_RUN_POINTS} points, got {t.size}")
    if not _decreasing(y):
        return PowerLawFit("run", {"L0": float(np.mean(y)), "A": 0.0, "alpha": 0.0}, 0.0, True, t.size,
                           ["curve does not decrease"])
    c, a, p, r2 = fit_offset_power_law(eta * t, y)
    degenerate = p >= 0
    return PowerLawFit("run", {"L0": c, "A": a, "alpha": -p}, r2, degenerate, t.size)


def _decreasing(y: np.ndarray) -> bool:
    span = np.ptp(y)
    if span <= 1e-12 * max(1.0, abs(float(np.mean(y)))):
        return False
    # compare the ends robustly, using the first and last tenths
    n = max(1, y.size // 10)
    return float(np.mean(y[:n])) > float(np.mean(y[-n:]))


def fit_L0_elr(L0_values, gammas) -> PowerLawFit:
    """``L0(gamma) = L01 + L02 * gamma**L03`` over per-run irreducible losses.

    Each run counts once regardless of its length.
    """
    y = np.asarray(L0_values, dtype=np.float64)
    g = np.asarray(gammas, dtype=np.float64)
    if len(np.unique(np.round(g, 15))) < MIN_ELR_LEVELS:
        raise InsufficientDataError(f"need >= {MIN_ELR_LEVELS} distinct gamma levels")
    span = np.ptp(y)
    if span <= 1e-9 * max(1.0, abs(float(np.mean(y)))):
        return PowerLawFit("L0_elr", {"L01": float(np.mean(y)), "L02": 0.0, "L03": 0.0}, 0.0, True, y.size,
                           ["L0 constant over gamma"])
    c, a, p, r2 = fit_offset_power_law(g, y)
    return PowerLawFit("L0_elr", {"L01": c, "L02": a, "L03": p}, r2, bool(p <= 0), y.size)


def stable_noise_level(record, key: str = "gns_tr_noise") -> float:
    """Median of a GNS series over the final third of training, valid points only."""
    toks, vals = record.series(key)
    valid_t = {p.tokens for p in record.points if p.gns_valid}
    keep = np.array([t in valid_t for t in toks], dtype=bool)
    toks, vals = toks[keep], vals[keep]
    if toks.size == 0:
        return math.nan
    total = record.config.total_tokens
    tail = toks >= total * (2.0 / 3.0)
    if not tail.any():
        tail = toks >= toks[-1] * (2.0 / 3.0)
    return float(np.median(vals[tail]))


def fit_noise_elr(levels, gammas) -> PowerLawFit:
    """``G = G1 * gamma**G2`` by log-log regression; nonpositive levels are dropped."""
    G = np.asarray(levels, dtype=np.float64)
    g = np.asarray(gammas, dtype=np.float64)
    ok = np.isfinite(G) & (G > 0)
    notes = []
    if not ok.all():
        msg = f"excluded {int((~ok).sum())} run(s) with nonpositive noise level"
        warnings.warn(msg, stacklevel=2)
        notes.append(msg)
    G, g = G[ok], g[ok]
    if len(np.unique(g)) < 2:
        raise InsufficientDataError("need at least two distinct gamma levels")
    coef, expo, r2 = loglog_fit(g, G)
    return PowerLawFit("noise_elr", {"G1": coef, "G2": expo}, r2, False, G.size, notes)


# ---------------------------------------------------------------------------
# paraboloids
# ---------------------------------------------------------------------------

@dataclass
class ParaboloidFit:
    """``c + b.x + x.H.x / 2`` in ``x = (log2 eta, log2 lambda)``."""

    c: float
    b: np.ndarray
    H: np.ndarray
    eigenvalues: np.ndarray  # descending
    v1: np.ndarray
    pd: bool
    x_star: np.ndarray | None
    minimum: float | None
    residual_norm: float
    n_used: int
    n_excluded: int

    @property
    def angle(self) -> float:
        """Direction of the top eigenvector, degrees from the log2-eta axis."""
        return math.degrees(math.atan2(self.v1[1], self.v1[0]))

    def __call__(self, x) -> float:
        x = np.asarray(x, dtype=np.float64)
        return float(self.c + self.b @ x + 0.5 * x @ self.H @ x)

    def optimum(self) -> tuple[float, float] | None:
        """(eta*, lambda*) at the minimizer, when it exists."""
        if self.x_star is None:
            return None
        return float(2.0 ** self.x_star[0]), float(2.0 ** self.x_star[1])

    def to_dict(self) -> dict:
        return {
            "c": self.c, "b": self.b.tolist(), "H": self.H.tolist(),
            "eigenvalues": self.eigenvalues.tolist(), "v1": self.v1.tolist(), "v1_angle_deg": self.angle,
            "pd": self.pd, "x_star": None if self.x_star is None else self.x_star.tolist(),
            "minimum": self.minimum, "optimum": self.optimum(), "residual_norm": self.residual_norm,
            "n_used": self.n_used, "n_excluded": self.n_excluded,
        }


def fit_paraboloid(etas, lambdas, losses) -> ParaboloidFit:
    """Least-squares quadratic surface over a sweep; NaN losses are diverged cells and excluded."""
    eta = np.asarray(etas, dtype=np.float64)
    lam = np.asarray(lambdas, dtype=np.float64)
    L = np.asarray(losses, dtype=np.float64)
    ok = np.isfinite(L)
    n_excluded = int((~ok).sum())
    x, y, L = np.log2(eta[ok]), np.log2(lam[ok]), L[ok]
    if L.size < MIN_CELLS:
        raise InsufficientDataError(f"need >= {MIN_CELLS} non-diverged cells, got {L.size}")
    A = np.column_stack([np.ones_like(x), x, y, 0.5 * x * x, x * y, 0.5 * y * y])
    res = solve_least_squares(A, L)
    c, b1, b2, h11, h12, h22 = res.x
    b = np.array([b1, b2])
    H = np.array([[h11, h12], [h12, h22]])
    vals, vecs = eigen_sym2(H)
    pd = bool(vals[1] > 0)
    x_star = minimum = None
    if pd:
        x_star = -np.linalg.solve(H, b)
        minimum = float(c + b @ x_star + 0.5 * x_star @ H @ x_star)
    return ParaboloidFit(float(c), b, H, vals, vecs[:, 0], pd, x_star, minimum, res.residual_norm,
                         int(L.size), n_excluded)


@dataclass
class EigenPoint:
    tokens: float
    lam1: float
    lam2: float
    angle: float
    pd: bool
    error: str | None = None


def eigen_series(horizon_cells: Sequence[tuple[float, Sequence[tuple[float, float, float]]]]) -> list[EigenPoint]:
    """One paraboloid per horizon; a failed horizon is kept as a masked (NaN) entry."""
    out = []
    for tokens, cells in horizon_cells:
        eta, lam, L = (np.array(col, dtype=np.float64) for col in zip(*cells)) if cells else ([], [], [])
        try:
            fit = fit_paraboloid(eta, lam, L)
        except (InsufficientDataError, DegenerateFitError) as e:
            nan = math.nan
            out.append(EigenPoint(float(tokens), nan, nan, nan, False, str(e)))
            continue
        out.append(EigenPoint(float(tokens), float(fit.eigenvalues[0]), float(fit.eigenvalues[1]), fit.angle, fit.pd))
    return out


def loss_at(record, tokens: float, metric: str = "val_loss") -> float:
    """Interpolated metric at a token count; NaN if diverged or not covered."""
    if record.status != "completed":
        return math.nan
    toks, vals = record.series(metric)
    if toks.size == 0 or tokens < toks[0] or tokens > toks[-1]:
        return math.nan
    return float(np.interp(tokens, toks, vals))


def eigen_dynamics(records, horizons: Sequence[float], metric: str = "val_loss") -> list[EigenPoint]:
    cells = []
    for h in horizons:
        cells.append((h, [(r.config.eta, r.config.lam, loss_at(r, h, metric)) for r in records]))
    return eigen_series(cells)


# ---------------------------------------------------------------------------
# scaling laws across budgets
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class Optimum:
    D: float
    eta: float
    lam: float
    gamma: float
    loss: float


@dataclass
class ScalingLaws:
    eta: PowerLawFit
    lam: PowerLawFit
    gamma: PowerLawFit
    loss: PowerLawFit

    def to_dict(self) -> dict:
        return {"eta": self.eta.to_dict(), "lam": self.lam.to_dict(), "gamma": self.gamma.to_dict(),
                "loss": self.loss.to_dict()}


def optimum_from_fit(D: float, fit: ParaboloidFit) -> Optimum:
    if not fit.pd:
        raise DegenerateFitError("paraboloid is not positive definite; no optimum", fit.v1)
    eta, lam = fit.optimum()
    return Optimum(D, eta, lam, eta * lam, fit.minimum)


def fit_scaling_laws(optima: Sequence[Optimum], rtol: float = 1e-9) -> ScalingLaws:
    """``eta(D) = eta1 * D**eta2`` (likewise lambda, gamma) and ``L(D) = E + B * D**(-beta)``."""
    D = np.array([o.D for o in optima], dtype=np.float64)
    if len(np.unique(D)) < MIN_BUDGETS:
        raise InsufficientDataError(f"need >= {MIN_BUDGETS} distinct budgets, got {len(np.unique(D))}")
    eta = np.array([o.eta for o in optima])
    lam = np.array([o.lam for o in optima])
    gam = np.array([o.gamma for o in optima])
    if not np.allclose(gam, eta * lam, rtol=rtol, atol=0.0):
        raise ValueError("gamma optima must equal eta * lambda optima")
    laws = {}
    for name, v in (("eta", eta), ("lam", lam), ("gamma", gam)):
        coef, expo, r2 = loglog_fit(D, v)
        laws[name] = PowerLawFit(f"{name}_D", {"coef": coef, "exponent": expo}, r2, False, D.size)
    E, B, p, r2 = fit_offset_power_law(D, [o.loss for o in optima])
    laws["loss"] = PowerLawFit("loss_D", {"E": E, "B": B, "beta": -p}, r2, bool(p >= 0), D.size)
    return ScalingLaws(**laws)
