import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from trajlab.model import ModelConfig, NumericFault, ParamSet, init_params
from trajlab.optim import (
    AdamState,
    BsSchedule,
    LrSchedule,
    OptimConfig,
    adamw_step,
    batch_size_at,
    clip_global_norm,
    lr_at,
)

# smallest model: every tensor holds one or two scalars
SCALAR = ModelConfig(vocab_size=2, context_k=1, embed_dim=1, num_blocks=0)


def scalar_params(w):
    p = ParamSet.zeros(SCALAR)
    for name in p.names():
        p[name] = np.full(p[name].shape, w)
    return p


def step_once(w, g, lr, lam):
    p = scalar_params(w)
    grads = scalar_params(g)
    adamw_step(p, grads, AdamState.fresh(p), lr, OptimConfig(peak_lr=lr, weight_decay=lam))
    return p


def test_adamw_hand_example():
    p = step_once(1.0, 0.5, 0.1, 0.1)
    w = p["head"][0, 0]
    # mhat = 0.5, vhat = 0.25
    assert abs(w - (1.0 - 0.1 * 0.5 / (0.5 + 1e-8) - 0.1 * 0.1 * 1.0)) < 1e-12
    assert abs(w - 0.89) < 1e-8
    assert p["norm_f"][0] == pytest.approx(0.9, abs=1e-8)  # gains are not decayed


def test_adamw_no_decay_variant():
    w = step_once(1.0, 0.5, 0.1, 0.0)["head"][0, 0]
    assert abs(w - (1.0 - 0.1 * 0.5 / (0.5 + 1e-8))) < 1e-12
    assert abs(w - 0.9) < 1e-8


def test_pure_decay_is_geometric():
    p = init_params(ModelConfig(vocab_size=4, context_k=2, embed_dim=3, num_blocks=1), 0)
    start = p.copy()
    st = AdamState.fresh(p)
    zero = ParamSet.zeros(p.config)
    oc = OptimConfig(peak_lr=0.05, weight_decay=0.2)
    for _ in range(50):
        adamw_step(p, zero, st, 0.05, oc)
    for name, w in p.items():
        expect = start[name] * (1 - 0.05 * 0.2) ** 50 if oc.decays(name) else start[name]
        np.testing.assert_allclose(w, expect, rtol=0, atol=1e-12)
    assert st.m.sqnorm() == 0.0 and st.v.sqnorm() == 0.0


def test_decay_scales_with_lambda():
    def shrink(lam):
        return 1.0 - step_once(1.0, 0.0, 0.1, lam)["head"][0, 0]

    assert shrink(2e-4) == pytest.approx(2 * shrink(1e-4), rel=1e-9)


def test_decay_gains_flag():
    oc = OptimConfig(peak_lr=0.1, weight_decay=0.1, decay_gains=True)
    assert oc.decays("norm_f") and oc.decays("head")
    assert not OptimConfig(peak_lr=0.1, weight_decay=0.1).decays("blocks.0.norm")


def test_vhat_is_bias_corrected():
    p = scalar_params(1.0)
    st = AdamState.fresh(p)
    assert st.vhat(0.95) is None
    adamw_step(p, scalar_params(0.5), st, 0.0, OptimConfig(peak_lr=0.1, weight_decay=0.0))
    assert st.vhat(0.95)["head"][0, 0] == pytest.approx(0.25, abs=1e-15)


@pytest.mark.parametrize("bad", [dict(beta1=1.0), dict(beta2=-0.1), dict(peak_lr=-1.0), dict(clip_norm=0.0),
                                 dict(weight_decay=-0.1)])
def test_optim_config_validation(bad):
    with pytest.raises(ValueError):
        OptimConfig(**({"peak_lr": 0.1, "weight_decay": 0.1} | bad))


def test_clip_examples():
    g = scalar_params(0.0)
    g["head"] = np.array([[2.0, 0.0]]).reshape(g["head"].shape)
    out, scale = clip_global_norm(g, 1.0)
    assert scale == 0.5 and out.norm() == pytest.approx(1.0)
    g["head"] = g["head"] / 4
    out, scale = clip_global_norm(g, 1.0)
    assert scale == 1.0 and out is g
    out, scale = clip_global_norm(ParamSet.zeros(SCALAR), 1.0)
    assert scale == 1.0 and out.sqnorm() == 0.0


def test_clip_non_finite():
    g = scalar_params(np.nan)
    with pytest.raises(NumericFault):
        clip_global_norm(g, 1.0)


@settings(max_examples=50, deadline=None)
@given(st.floats(0.01, 100.0), st.floats(0.1, 10.0))
def test_clip_idempotent(mag, clip):
    g = scalar_params(mag)
    once, _ = clip_global_norm(g, clip)
    twice, _ = clip_global_norm(once, clip)
    for name in g.names():
        np.testing.assert_allclose(once[name], twice[name], rtol=1e-12)


def test_lr_examples():
    warm = LrSchedule("constant", total_tokens=10**7, warmup_tokens=10**6)
    assert lr_at(warm, 5 * 10**5, 1.0) == 0.5
    assert lr_at(warm, 5 * 10**6, 1.0) == 1.0
    wsd = LrSchedule("wsd", total_tokens=10**8, warmup_tokens=10**6, decay_tokens=5 * 10**6)
    assert lr_at(wsd, 10**8 - 2.5 * 10**6, 1.0) == 0.5
    assert lr_at(wsd, 10**8, 1.0) == 0.0
    assert lr_at(wsd, 10**8 - 5 * 10**6, 1.0) == 1.0


def test_lr_out_of_range():
    s = LrSchedule("constant", total_tokens=100)
    with pytest.raises(ValueError):
        lr_at(s, 101)
    with pytest.raises(ValueError):
        lr_at(s, -1)


@pytest.mark.parametrize("kind", ["constant", "wsd"])
def test_lr_continuous(kind):
    total = 10_000
    s = LrSchedule(kind, total, warmup_tokens=1000, decay_tokens=2000 if kind == "wsd" else 0)
    grid = np.arange(0, total + 1)
    eta = np.array([lr_at(s, t, 1.0) for t in grid])
    jumps = np.abs(np.diff(eta))
    assert jumps.max() <= 1.0 / 1000 + 1e-12  # one token of the steepest ramp


def test_schedule_validation():
    with pytest.raises(ValueError):
        LrSchedule("wsd", total_tokens=100, warmup_tokens=60, decay_tokens=50)
    with pytest.raises(ValueError):
        LrSchedule("cosine", total_tokens=100)
    with pytest.raises(ValueError):
        BsSchedule.type2(64, 64, 10)


def test_batch_size_examples():
    assert batch_size_at(BsSchedule.fixed(512), 123456) == 512
    t2 = BsSchedule.type2(64, 1024, 10**6)
    assert batch_size_at(t2, 10**6 - 1) == 64
    assert batch_size_at(t2, 10**6) == 1024
