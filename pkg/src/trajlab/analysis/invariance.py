"""Curve alignment and relative-distance invariance analysis."""

from __future__ import annotations

import itertools
import logging
import warnings
from dataclasses import dataclass, field, replace
from typing import Sequence

import numpy as np

log = logging.getLogger(__name__)

DEFAULT_THRESHOLD = 0.005
DEFAULT_MARGIN = 3.0
GROUP_KEYS = {"elr": "gamma", "lr": "eta"}


class UndefinedDistanceError(ValueError):
    pass


class DegenerateGroupingError(ValueError):
    pass


class CoverageWarning(UserWarning):
    pass


@dataclass
class Curve:
    """One metric on a token grid; NaN entries are masked."""

    tokens: np.ndarray
    values: np.ndarray
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        self.tokens = np.asarray(self.tokens, dtype=np.float64)
        self.values = np.asarray(self.values, dtype=np.float64)
        if self.tokens.shape != self.values.shape or self.tokens.ndim != 1:
            raise ValueError("tokens and values must be 1-d arrays of equal length")
        if self.tokens.size > 1 and not np.all(np.diff(self.tokens) > 0):
            raise ValueError("token grid must be strictly increasing")

    @property
    def mask(self) -> np.ndarray:
        return np.isfinite(self.values)

    def window(self, lo: float | None = None, hi: float | None = None) -> "Curve":
        keep = np.ones(self.tokens.shape, dtype=bool)
        if lo is not None:
            keep &= self.tokens >= lo
        if hi is not None:
            keep &= self.tokens <= hi
        return Curve(self.tokens[keep], self.values[keep], dict(self.meta))

    def label(self) -> str:
        m = self.meta
        if "eta" in m and "lam" in m:
            return f"eta=2^{np.log2(m['eta']):.0f} lam={m['lam']:g}"
        return str(m.get("hash", "?"))


def make_grid(start: float, stop: float, num: int) -> np.ndarray:
    return np.linspace(start, stop, num)


def ema(tokens: np.ndarray, values: np.ndarray, halflife_tokens: float) -> np.ndarray:
    """Exponential moving average with a half-life measured in tokens.

    Works on non-uniform grids; masked (NaN) entries are skipped and stay NaN.
    The running average is bias-corrected so a constant series is a fixed point.
    """
    if halflife_tokens <= 0:
        return values.copy()
    out = np.full_like(values, np.nan)
    acc = 0.0
    weight = 0.0
    prev_t = None
    for i, (t, v) in enumerate(zip(tokens, values)):
        if not np.isfinite(v):
            continue
        if prev_t is not None:
            decay = 0.5 ** ((t - prev_t) / halflife_tokens)
            acc *= decay
            weight *= decay
        acc += v
        weight += 1.0
        out[i] = acc / weight
        prev_t = t
    return out


def align_and_smooth(records, grid, metric: str = "val_loss", ema_halflife_tokens: float = 0.0) -> list[Curve]:
    """Interpolate ``metric`` from each record onto ``grid``, then optionally smooth.

    Grid points outside a record's logged range are masked with a warning.
    """
    grid = np.asarray(grid, dtype=np.float64)
    curves = []
    for rec in records:
        toks, vals = rec.series(metric)
        y = np.full(grid.shape, np.nan)
        if toks.size:
            inside = (grid >= toks[0]) & (grid <= toks[-1])
            y[inside] = np.interp(grid[inside], toks, vals)
        if not np.all(np.isfinite(y)):
            warnings.warn(f"run {rec.config_hash} does not cover the grid for {metric}; "
                          f"{int(np.sum(~np.isfinite(y)))} points masked", CoverageWarning, stacklevel=2)
        y = ema(grid, y, ema_halflife_tokens)
        cfg = rec.config
        meta = {
            "hash": rec.config_hash,
            "eta": cfg.eta,
            "lam": cfg.lam,
            "gamma": cfg.gamma,
            "batch_size": cfg.bs_schedule.batch_size or cfg.bs_schedule.b_small,
            "metric": metric,
            "status": rec.status,
        }
        curves.append(Curve(grid.copy(), y, meta))
    return curves


def rel_distance(a1, a2) -> float:
    """``||a1 - a2|| / sqrt((||a1||^2 + ||a2||^2) / 2)`` over commonly unmasked points."""
    if isinstance(a1, Curve) or isinstance(a2, Curve):
        if isinstance(a1, Curve) and isinstance(a2, Curve):
            if a1.tokens.shape != a2.tokens.shape or not np.array_equal(a1.tokens, a2.tokens):
                raise ValueError("curves must share a token grid")
        a1 = a1.values if isinstance(a1, Curve) else a1
        a2 = a2.values if isinstance(a2, Curve) else a2
    x = np.asarray(a1, dtype=np.float64)
    y = np.asarray(a2, dtype=np.float64)
    if x.shape != y.shape:
        raise ValueError(f"shape mismatch {x.shape} vs {y.shape}")
    both = np.isfinite(x) & np.isfinite(y)
    x, y = x[both], y[both]
    scale = max(np.abs(x).max(initial=0.0), np.abs(y).max(initial=0.0))
    if scale == 0.0:
        raise UndefinedDistanceError("relative distance undefined for two zero (or fully masked) curves")
    x, y = x / scale, y / scale  # the ratio is scale-free; this keeps tiny inputs from underflowing
    denom = np.sqrt(0.5 * (np.dot(x, x) + np.dot(y, y)))
    if denom == 0.0:
        raise UndefinedDistanceError("relative distance undefined for two zero (or fully masked) curves")
    return float(np.linalg.norm(x - y) / denom)


@dataclass
class PairwiseResult:
    matrix: np.ndarray
    below: np.ndarray
    threshold: float
    labels: list[str]


def pairwise_matrix(curves: Sequence[Curve], threshold: float = DEFAULT_THRESHOLD) -> PairwiseResult:
    n = len(curves)
    if n < 2:
        raise ValueError("need at least two curves")
    D = np.zeros((n, n))
    for i, j in itertools.combinations(range(n), 2):
        D[i, j] = D[j, i] = rel_distance(curves[i], curves[j])
    return PairwiseResult(D, D < threshold, threshold, [c.label() for c in curves])


def group_key(curve: Curve, key: str):
    """Group label for a curve; float keys are rounded so eta*lam products coincide."""
    field_name = GROUP_KEYS.get(key, key)
    if field_name not in curve.meta:
        raise KeyError(f"curve lacks metadata {field_name!r}")
    v = curve.meta[field_name]
    if isinstance(v, float):
        return float(f"{v:.10g}")
    return v


def _groups(curves: Sequence[Curve], key: str) -> dict:
    groups: dict = {}
    for i, c in enumerate(curves):
        groups.setdefault(group_key(c, key), []).append(i)
    try:
        return dict(sorted(groups.items()))
    except TypeError:
        return groups


@dataclass
class GroupMatrix:
    keys: list
    matrix: np.ndarray  # NaN where undefined (singleton within-entries)
    sizes: list[int]
    threshold: float

    @property
    def below(self) -> np.ndarray:
        return np.nan_to_num(self.matrix, nan=np.inf) < self.threshold


def group_distance(curves: Sequence[Curve], key: str = "elr", threshold: float = DEFAULT_THRESHOLD,
                   pairwise: np.ndarray | None = None) -> GroupMatrix:
    """Mean pairwise distance between groups; within-group entries use distinct pairs only."""
    D = pairwise_matrix(curves, threshold).matrix if pairwise is None else pairwise
    groups = _groups(curves, key)
    keys = list(groups)
    G = np.full((len(keys), len(keys)), np.nan)
    for a, ka in enumerate(keys):
        for b, kb in enumerate(keys):
            ia, ib = groups[ka], groups[kb]
            if a == b:
                pairs = [D[i, j] for i, j in itertools.combinations(ia, 2)]
            else:
                pairs = [D[i, j] for i in ia for j in ib]
            if pairs:
                G[a, b] = float(np.mean(pairs))
    return GroupMatrix(keys, G, [len(groups[k]) for k in keys], threshold)


@dataclass
class GroupVerdict:
    key: object
    members: int
    within: float
    across: float
    invariant: bool


@dataclass
class InvarianceVerdict:
    groups: list[GroupVerdict]
    invariant: bool
    threshold: float
    margin: float
    key: str

    def summary(self) -> str:
        word = "invariant" if self.invariant else "not invariant"
        return f"{word} by {self.key} ({sum(g.invariant for g in self.groups)}/{len(self.groups)} groups pass)"


def detect_invariance(curves: Sequence[Curve], key: str = "elr", threshold: float = DEFAULT_THRESHOLD,
                      margin: float = DEFAULT_MARGIN, pairwise: np.ndarray | None = None) -> InvarianceVerdict:
    """A group is invariant when its members are close to each other and far from everyone else.

    within < threshold and within < across / margin, where within averages the
    group's distinct pairs and across averages every pair with exactly one
    member in the group.
    """
    groups = _groups(curves, key)
    if len(groups) < 2:
        raise DegenerateGroupingError(f"need at least two {key} groups, got {len(groups)}")
    small = [k for k, idx in groups.items() if len(idx) < 2]
    if small:
        raise DegenerateGroupingError(f"groups with fewer than two members: {small}")
    D = pairwise_matrix(curves, threshold).matrix if pairwise is None else pairwise
    out = []
    for k, idx in groups.items():
        others = [j for j in range(len(curves)) if j not in idx]
        within = float(np.mean([D[i, j] for i, j in itertools.combinations(idx, 2)]))
        across = float(np.mean([D[i, j] for i in idx for j in others]))
        ok = within < threshold and within < across / margin
        out.append(GroupVerdict(k, len(idx), within, across, bool(ok)))
    return InvarianceVerdict(out, all(g.invariant for g in out), threshold, margin, key)


def shuffled_labels(curves: Sequence[Curve], key: str = "elr", seed: int = 0) -> list[Curve]:
    """Permutation control: reassign group labels so every new group mixes the old ones.

    With equal group sizes the new groups form a Latin square over the old ones
    (each new group takes exactly one member from every old group); otherwise
    the labels are randomly permuted until no old group survives intact.
    """
    groups = _groups(curves, key)
    field_name = GROUP_KEYS.get(key, key)
    rng = np.random.default_rng(seed)
    sizes = {len(v) for v in groups.values()}
    n_groups = len(groups)
    labels = [None] * len(curves)
    if len(sizes) == 1 and sizes.pop() == n_groups:
        for g, idx in enumerate(groups.values()):
            idx = list(rng.permutation(idx))
            for r, i in enumerate(idx):
                labels[i] = (g + r) % n_groups
    else:
        orig = [group_key(c, key) for c in curves]
        for _ in range(1000):
            perm = rng.permutation(orig)
            if not any(sorted(np.flatnonzero(perm == k)) == idx for k, idx in groups.items()):
                break
        labels = list(perm)
    return [replace(c, meta={**c.meta, field_name: f"shuffled-{lab}"}) for c, lab in zip(curves, labels)]
