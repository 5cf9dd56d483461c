"""k-gram RMSNorm MLP language model with hand-written backprop.

Architecture, for a batch of ``B`` windows of ``k`` previous tokens::

    concat(embed[x_1..x_k])  -> proj_in (k*d -> d)
    N x [ h += down(gelu(up(rmsnorm(h) * gain))) ]
    rmsnorm(h) * gain_f      -> head (d -> V) -> softmax cross-entropy

Everything is float64. GeLU is the tanh approximation
``0.5 x (1 + tanh(sqrt(2/pi) (x + 0.044715 x^3)))``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .numkit import RngStream

GELU_C = math.sqrt(2.0 / math.pi)
GELU_A = 0.044715


class NumericFault(FloatingPointError):
    """Non-finite value produced inside the network."""

    def __init__(self, where: str):
        super().__init__(f"non-finite activation in {where}")
        self.where = where


class StaleCacheError(RuntimeError):
    pass


@dataclass(frozen=True)
class ModelConfig:
    vocab_size: int
    context_k: int = 4
    embed_dim: int = 64
    num_blocks: int = 2
    hidden_mult: int = 4
    rmsnorm_eps: float = 1e-6
    init_sigma: float = 0.02

    def __post_init__(self):
        if self.vocab_size < 2:
            raise ValueError("vocab_size must be >= 2")
        if self.embed_dim < 1 or self.context_k < 1 or self.num_blocks < 0 or self.hidden_mult < 1:
            raise ValueError(f"invalid model shape: {self}")
        if not self.init_sigma > 0:
            raise ValueError("init_sigma must be > 0")

    @property
    def hidden_dim(self) -> int:
        return self.hidden_mult * self.embed_dim

    def shapes(self) -> dict[str, tuple[int, ...]]:
        V, k, d, h = self.vocab_size, self.context_k, self.embed_dim, self.hidden_dim
        out = {"embed": (V, d), "proj_in": (k * d, d)}
        for i in range(self.num_blocks):
            out[f"blocks.{i}.norm"] = (d,)
            out[f"blocks.{i}.up"] = (d, h)
            out[f"blocks.{i}.down"] = (h, d)
        out["norm_f"] = (d,)
        out["head"] = (d, V)
        return out

    def num_params(self) -> int:
        return sum(math.prod(s) for s in self.shapes().values())


def is_gain(name: str) -> bool:
    return name.endswith("norm") or name == "norm_f"


class ParamSet:
    """Ordered named tensors. Also used for gradients and optimizer moments."""

    def __init__(self, config: ModelConfig, tensors: dict[str, np.ndarray]):
        shapes = config.shapes()
        if list(tensors) != list(shapes):
            raise ValueError(f"tensor names {list(tensors)} do not match {list(shapes)}")
        for name, arr in tensors.items():
            if arr.shape != shapes[name]:
                raise ValueError(f"{name}: shape {arr.shape}, expected {shapes[name]}")
        self.config = config
        self.tensors = tensors
        self.version = 0

    @classmethod
    def zeros(cls, config: ModelConfig) -> "ParamSet":
        return cls(config, {n: np.zeros(s) for n, s in config.shapes().items()})

    def __getitem__(self, name: str) -> np.ndarray:
        return self.tensors[name]

    def __setitem__(self, name: str, value: np.ndarray) -> None:
        if value.shape != self.tensors[name].shape:
            raise ValueError(f"{name}: shape {value.shape}, expected {self.tensors[name].shape}")
        self.tensors[name] = value
        self.version += 1

    def __iter__(self):
        return iter(self.tensors)

    def items(self):
        return self.tensors.items()

    def names(self) -> list[str]:
        return list(self.tensors)

    def copy(self) -> "ParamSet":
        return ParamSet(self.config, {n: a.copy() for n, a in self.tensors.items()})

    def flat(self) -> np.ndarray:
        return np.concatenate([a.ravel() for a in self.tensors.values()])

    def sqnorm(self) -> float:
        return float(sum(np.dot(a.ravel(), a.ravel()) for a in self.tensors.values()))

    def norm(self) -> float:
        return math.sqrt(self.sqnorm())

    def touch(self) -> None:
        """Mark in-place modification so stale caches are detected."""
        self.version += 1


def init_params(config: ModelConfig, seed: int) -> ParamSet:
    """Gaussian(0, sigma^2) weights, unit RMSNorm gains."""
    rng = RngStream(seed, 0x1417)
    tensors = {}
    for name, shape in config.shapes().items():
        if is_gain(name):
            tensors[name] = np.ones(shape)
        else:
            tensors[name] = rng.normal(shape, config.init_sigma)
    return ParamSet(config, tensors)


def gelu(x):
    return 0.5 * x * (1.0 + np.tanh(GELU_C * (x + GELU_A * x * x * x)))


def _gelu_grad(x, t):
    # t = tanh(inner) from the forward pass
    return 0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * GELU_A * x * x)


def _rms_fwd(h, gain, eps):
    r = 1.0 / np.sqrt(np.mean(h * h, axis=1, keepdims=True) + eps)
    return h * r * gain, r


def _rms_bwd(dy, h, r, gain):
    dgain = np.sum(dy * h * r, axis=0)
    dhat = dy * gain
    dh = r * (dhat - h * (r * r) * np.mean(dhat * h, axis=1, keepdims=True))
    return dh, dgain


def _check(arr, where):
    if not np.isfinite(arr).all():
        raise NumericFault(where)


@dataclass
class BackwardCache:
    params_id: int
    params_version: int
    inputs: np.ndarray
    targets: np.ndarray
    x: np.ndarray
    blocks: list = field(default_factory=list)
    h_final: np.ndarray | None = None
    r_final: np.ndarray | None = None
    n_final: np.ndarray | None = None
    probs: np.ndarray | None = None


def forward(params: ParamSet, inputs, targets) -> tuple[float, BackwardCache]:
    """Mean next-token cross-entropy (nats) and the activations for backward."""
    cfg = params.config
    inputs = np.asarray(inputs)
    targets = np.asarray(targets)
    V, k, d = cfg.vocab_size, cfg.context_k, cfg.embed_dim
    if inputs.ndim != 2 or inputs.shape[1] != k:
        raise ValueError(f"inputs must have shape (B, {k}), got {inputs.shape}")
    if targets.shape != (inputs.shape[0],):
        raise ValueError(f"targets must have shape ({inputs.shape[0]},), got {targets.shape}")
    if inputs.size and (inputs.min() < 0 or inputs.max() >= V):
        raise ValueError(f"input token id outside [0, {V})")
    if targets.size and (targets.min() < 0 or targets.max() >= V):
        raise ValueError(f"target token id outside [0, {V})")
    B = inputs.shape[0]
    eps = cfg.rmsnorm_eps

    x = params["embed"][inputs].reshape(B, k * d)
    h = x @ params["proj_in"]
    _check(h, "proj_in")
    cache = BackwardCache(id(params), params.version, inputs, targets, x)
    for i in range(cfg.num_blocks):
        gain = params[f"blocks.{i}.norm"]
        n, r = _rms_fwd(h, gain, eps)
        u = n @ params[f"blocks.{i}.up"]
        t = np.tanh(GELU_C * (u + GELU_A * u * u * u))
        a = 0.5 * u * (1.0 + t)
        cache.blocks.append((h, r, n, u, t, a))
        h = h + a @ params[f"blocks.{i}.down"]
        _check(h, f"blocks.{i}")
    nf, rf = _rms_fwd(h, params["norm_f"], eps)
    logits = nf @ params["head"]
    _check(logits, "head")
    logits = logits - logits.max(axis=1, keepdims=True)
    expl = np.exp(logits)
    z = expl.sum(axis=1, keepdims=True)
    logp = logits - np.log(z)
    loss = float(-np.mean(logp[np.arange(B), targets]))
    cache.h_final, cache.r_final, cache.n_final = h, rf, nf
    cache.probs = expl / z
    return loss, cache


def loss_only(params: ParamSet, inputs, targets) -> float:
    return forward(params, inputs, targets)[0]


def backward(params: ParamSet, cache: BackwardCache) -> ParamSet:
    """Gradient of the mean loss with respect to every tensor."""
    if cache.params_id != id(params) or cache.params_version != params.version:
        raise StaleCacheError("backward cache was produced by different or since-modified parameters")
    cfg = params.config
    B = cache.inputs.shape[0]
    k, d = cfg.context_k, cfg.embed_dim
    grads = {}

    dlogits = cache.probs.copy()
    dlogits[np.arange(B), cache.targets] -= 1.0
    dlogits /= B
    grads["head"] = cache.n_final.T @ dlogits
    dnf = dlogits @ params["head"].T
    dh, grads["norm_f"] = _rms_bwd(dnf, cache.h_final, cache.r_final, params["norm_f"])

    for i in reversed(range(cfg.num_blocks)):
        h_in, r, n, u, t, a = cache.blocks[i]
        down = params[f"blocks.{i}.down"]
        grads[f"blocks.{i}.down"] = a.T @ dh
        du = (dh @ down.T) * _gelu_grad(u, t)
        grads[f"blocks.{i}.up"] = n.T @ du
        dn = du @ params[f"blocks.{i}.up"].T
        dh_norm, grads[f"blocks.{i}.norm"] = _rms_bwd(dn, h_in, r, params[f"blocks.{i}.norm"])
        dh = dh + dh_norm

    grads["proj_in"] = cache.x.T @ dh
    dx = (dh @ params["proj_in"].T).reshape(B * k, d)
    dembed = np.zeros_like(params["embed"])
    np.add.at(dembed, cache.inputs.reshape(-1), dx)
    grads["embed"] = dembed

    return ParamSet(cfg, {name: grads[name] for name in cfg.shapes()})


def loss_and_grad(params: ParamSet, inputs, targets) -> tuple[float, ParamSet]:
    loss, cache = forward(params, inputs, targets)
    return loss, backward(params, cache)


def expected_loss(params: ParamSet, inputs, target_probs, chunk: int = 8192) -> float:
    """Mean cross-entropy against full next-token distributions.

    ``target_probs[i]`` is the true distribution of the token following
    window ``i``; averaging the exact per-window cross-entropy removes the
    target-sampling noise from held-out evaluation.
    """
    total = 0.0
    n = inputs.shape[0]
    dummy = np.zeros(min(chunk, n), dtype=np.int64)
    for s in range(0, n, chunk):
        x = inputs[s:s + chunk]
        _, cache = forward(params, x, dummy[: x.shape[0]])
        logp = np.log(np.maximum(cache.probs, 1e-300))
        total += float(-(target_probs[s:s + chunk] * logp).sum())
    return total / n


def grad_check(params: ParamSet, inputs, targets, fd_step: float = 1e-5,
               n_coords: int = 500, seed: int = 0, floor: float = 1e-5,
               grads: ParamSet | None = None) -> float:
    """Worst relative gap between analytic and central-difference gradients.

    Samples at least ``n_coords`` coordinates, with every tensor represented.
    The relative error of a coordinate is ``|a - n| / max(|a|, |n|, floor)``.
    """
    if not 1e-7 <= fd_step <= 1e-3:
        raise ValueError(f"fd_step must lie in [1e-7, 1e-3], got {fd_step}")
    if grads is None:
        _, grads = loss_and_grad(params, inputs, targets)
    rng = np.random.default_rng(seed)
    names = params.names()
    total = sum(params[n].size for n in names)
    picks = []
    for name in names:
        size = params[name].size
        want = max(min(size, 8), int(round(n_coords * size / total)))
        idx = rng.choice(size, size=min(want, size), replace=False)
        picks.extend((name, int(i)) for i in idx)

    probe = params.copy()
    worst = 0.0
    for name, i in picks:
        arr = probe[name].reshape(-1)
        orig = arr[i]
        arr[i] = orig + fd_step
        lp = loss_only(probe, inputs, targets)
        arr[i] = orig - fd_step
        lm = loss_only(probe, inputs, targets)
        arr[i] = orig
        numeric = (lp - lm) / (2.0 * fd_step)
        analytic = grads[name].reshape(-1)[i]
        err = abs(analytic - numeric) / max(abs(analytic), abs(numeric), floor)
        worst = max(worst, err)
    return worst
