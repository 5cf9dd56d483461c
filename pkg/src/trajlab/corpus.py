"""Synthetic one-pass token stream from a seeded order-m Markov chain.

The chain stands in for a pretraining corpus: it never repeats, it is
reproducible from a seed, and its conditional entropy gives an exact floor
for the achievable cross-entropy.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

from .numkit import RngStream

log = logging.getLogger(__name__)

# tag values used to derive independent streams from one data seed
TAG_TABLE = 0
TAG_TRAIN = 1
TAG_VAL = 2

try:
    from numba import njit

    _HAS_NUMBA = True
except ImportError:  # pragma: no cover - optional speedup
    _HAS_NUMBA = False

    def njit(*args, **kwargs):
        def dec(f):
            return f

        return dec if not args or not callable(args[0]) else args[0]


class NonErgodicError(RuntimeError):
    pass


@dataclass
class MarkovSource:
    V: int
    m: int
    table: np.ndarray  # (V**m, V), row c = P(. | context c)
    seed: int
    concentration: float

    def __post_init__(self):
        self.cum = np.cumsum(self.table, axis=1)
        self.cum[:, -1] = 1.0

    @property
    def n_contexts(self) -> int:
        return self.V**self.m


def build_source(seed: int, V: int, m: int = 2, concentration: float = 0.3, backoff: float = 0.0) -> MarkovSource:
    """Draw a random order-``m`` transition table.

    With ``backoff == 0`` every row is an independent symmetric
    Dirichlet(concentration) draw. With ``backoff > 0`` only the order-1 rows
    are symmetric; each longer context (x1..xj) then draws its row from
    Dirichlet(backoff * row(x2..xj)), so shorter contexts already carry most
    of the predictive signal and longer ones refine it.
    """
    if V < 2:
        raise ValueError(f"V must be >= 2, got {V}")
    if m < 1:
        raise ValueError(f"order m must be >= 1, got {m}")
    if not concentration > 0:
        raise ValueError(f"concentration must be > 0, got {concentration}")
    if backoff < 0:
        raise ValueError(f"backoff must be >= 0, got {backoff}")
    rng = RngStream(seed, TAG_TABLE)
    if backoff == 0:
        table = rng.gen.dirichlet(np.full(V, float(concentration)), size=V**m)
    else:
        table = rng.gen.dirichlet(np.full(V, float(concentration)), size=V)
        for j in range(2, m + 1):
            # context c = (x1..xj) backs off to c % V**(j-1) = (x2..xj)
            parent = np.tile(table, (V, 1))
            draws = rng.gen.gamma(backoff * parent)
            sums = draws.sum(axis=1, keepdims=True)
            # all-underflow rows (tiny alphas) fall back to their parent
            table = np.where(sums > 0, draws / np.where(sums > 0, sums, 1.0), parent)
    table /= table.sum(axis=1, keepdims=True)
    return MarkovSource(V=V, m=m, table=table, seed=seed, concentration=float(concentration))


def source_from_table(table, m: int = 1) -> MarkovSource:
    """Wrap an explicit transition table (rows indexed by base-V context)."""
    table = np.asarray(table, dtype=np.float64)
    V = table.shape[1]
    if table.shape[0] != V**m:
        raise ValueError(f"table needs {V**m} rows for V={V}, m={m}; got {table.shape[0]}")
    if (table < 0).any() or not np.allclose(table.sum(axis=1), 1.0, atol=1e-12, rtol=0):
        raise ValueError("rows must be probability vectors")
    return MarkovSource(V=V, m=m, table=table, seed=-1, concentration=float("nan"))


def stationary_distribution(source: MarkovSource, tol: float = 1e-12, max_iter: int = 100_000) -> np.ndarray:
    """Stationary distribution over the V**m contexts by power iteration."""
    V, m = source.V, source.m
    n = source.n_contexts
    tail = V ** (m - 1)
    pi = np.full(n, 1.0 / n)
    for _ in range(max_iter):
        # context (x1..xm) -> (x2..xm, t): group mass by the dropped leading token
        nxt = (pi[:, None] * source.table).reshape(V, tail * V).sum(axis=0)
        nxt /= nxt.sum()
        if np.abs(nxt - pi).sum() < tol:
            return nxt
        pi = nxt
    raise NonErgodicError(f"power iteration did not converge within {max_iter} steps")


def entropy_floor(source: MarkovSource) -> float:
    """Conditional entropy of the next token given its order-m context (nats)."""
    pi = stationary_distribution(source)
    P = source.table
    with np.errstate(divide="ignore", invalid="ignore"):
        plogp = np.where(P > 0, P * np.log(P), 0.0)
    return float(-(pi * plogp.sum(axis=1)).sum())


@dataclass
class StreamState:
    """Position in a one-pass stream: its RNG plus the last ``m`` tokens."""

    rng: RngStream
    history: np.ndarray  # last m tokens, oldest first
    drawn: int = 0

    def snapshot(self) -> dict:
        return {
            "seed": self.rng.seed,
            "tags": list(self.rng.tags),
            "rng": _jsonable_state(self.rng.state),
            "history": [int(t) for t in self.history],
            "drawn": self.drawn,
        }

    @classmethod
    def restore(cls, snap: dict) -> "StreamState":
        rng = RngStream(snap["seed"], *snap["tags"])
        rng.state = _numpy_state(snap["rng"])
        return cls(rng=rng, history=np.asarray(snap["history"], dtype=np.int64), drawn=int(snap["drawn"]))


def open_stream(source: MarkovSource, seed: int, tag: int = TAG_TRAIN) -> StreamState:
    """Start a stream; the initial context is drawn uniformly."""
    rng = RngStream(seed, tag)
    u = rng.uniform(source.m)
    history = np.minimum((u * source.V).astype(np.int64), source.V - 1)
    return StreamState(rng=rng, history=history)


@dataclass
class TokenBatch:
    inputs: np.ndarray  # (B, k)
    targets: np.ndarray  # (B,)
    contexts: np.ndarray  # (B,) chain context index that generated each target
    token_count: int  # raw stream tokens consumed so far


@njit(cache=True)
def _walk(cum, V, m, history, u, out):
    ctx = 0
    for j in range(m):
        ctx = ctx * V + history[j]
    mod = V ** (m - 1)
    for i in range(u.shape[0]):
        row = cum[ctx]
        x = u[i]
        lo = 0
        hi = V - 1
        while lo < hi:
            mid = (lo + hi) // 2
            if row[mid] > x:
                hi = mid
            else:
                lo = mid + 1
        out[i] = lo
        ctx = (ctx % mod) * V + lo
    return ctx


def sample_tokens(source: MarkovSource, state: StreamState, n: int) -> np.ndarray:
    """Continue the chain by ``n`` tokens, advancing ``state`` in place."""
    u = state.rng.uniform(n)
    out = np.empty(n, dtype=np.int64)
    _walk(source.cum, source.V, source.m, state.history.astype(np.int64), u, out)
    m = source.m
    if n >= m:
        state.history = out[n - m:].copy()
    else:
        state.history = np.concatenate([state.history[n:], out])
    state.drawn += n
    return out


def next_batch(source: MarkovSource, B: int, k: int, state: StreamState) -> TokenBatch:
    """Draw ``B`` disjoint consecutive windows of ``k`` inputs plus one target."""
    if k < source.m:
        log.warning("context k=%d shorter than chain order m=%d; floor is unreachable", k, source.m)
    toks = sample_tokens(source, state, B * (k + 1)).reshape(B, k + 1)
    inputs = toks[:, :k]
    targets = toks[:, k]
    return TokenBatch(inputs=inputs, targets=targets, contexts=_context_index(source, inputs), token_count=state.drawn)


def _context_index(source: MarkovSource, inputs: np.ndarray) -> np.ndarray:
    m, V = source.m, source.V
    k = inputs.shape[1]
    ctx = np.zeros(inputs.shape[0], dtype=np.int64)
    for j in range(max(0, k - m), k):
        ctx = ctx * V + inputs[:, j]
    if k < m:
        return np.full(inputs.shape[0], -1, dtype=np.int64)
    return ctx


def validation_set(source: MarkovSource, n: int, k: int, seed: int) -> TokenBatch:
    """Held-out examples from a stream keyed off the validation tag only."""
    state = open_stream(source, seed, TAG_VAL)
    return next_batch(source, n, k, state)


def _jsonable_state(state: dict) -> dict:
    out = {}
    for key, val in state.items():
        if isinstance(val, dict):
            out[key] = _jsonable_state(val)
        elif isinstance(val, np.ndarray):
            out[key] = {"__array__": [int(x) for x in val], "dtype": str(val.dtype)}
        elif isinstance(val, (np.integer,)):
            out[key] = int(val)
        else:
            out[key] = val
    return out


def _numpy_state(state: dict) -> dict:
    out = {}
    for key, val in state.items():
        if isinstance(val, dict) and "__array__" in val:
            out[key] = np.array(val["__array__"], dtype=val["dtype"])
        elif isinstance(val, dict):
            out[key] = _numpy_state(val)
        else:
            out[key] = val
    return out
