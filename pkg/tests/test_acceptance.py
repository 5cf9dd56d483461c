"""The ten acceptance criteria, one test (or small group of tests) each.

Criterion 9 trains nine desk-scale runs (about 20 minutes on one core). Set
TRAJLAB_ACCEPTANCE_REGISTRY to a directory to keep those runs and the
invariance report between sessions; reruns then only redo the analysis.
"""

import math
import os
import time
from dataclasses import replace
from pathlib import Path

import numpy as np
import pytest

from trajlab.analysis import (
    Curve,
    Optimum,
    align_and_smooth,
    decayed_loss,
    detect_invariance,
    fit_L0_elr,
    fit_noise_elr,
    fit_paraboloid,
    fit_run_power_law,
    fit_scaling_laws,
    group_distance,
    pairwise_matrix,
    predict_decay_gain,
    rel_distance,
    shuffled_labels,
    tau_series,
)
from trajlab.cli import main as cli_main
from trajlab.config import desk_config
from trajlab.corpus import next_batch, open_stream
from trajlab.gns import BatchRegime, classify_batch_regime, estimate_step, smooth
from trajlab.model import ModelConfig, ParamSet, grad_check, init_params
from trajlab.optim import AdamState, LrSchedule, OptimConfig, adamw_step, lr_at
from trajlab.runner import (
    COMPLETED,
    Registry,
    RunRecord,
    SweepSpec,
    TrainState,
    resume,
    run_loop,
    run_sweep,
    source_for,
    train,
)

from conftest import fake_record, tiny_config
from test_gns import gaussian_stream

GAMMAS = 6.25e-6 * 2.0 ** np.arange(9)


def _desk_batch(cfg, n=32, seed=99):
    src = source_for(cfg)
    return next_batch(src, n, cfg.model.context_k, open_stream(src, seed))


# -- 1 ------------------------------------------------------------------------

@pytest.mark.criterion(1, "gradient check < 1e-4 at init, after 100 steps and at a trained checkpoint")
def test_gradient_correctness(tmp_path):
    start = time.perf_counter()
    cfg = desk_config()
    batch = _desk_batch(cfg)
    worst = {"init": grad_check(init_params(cfg.model, 0), batch.inputs, batch.targets, n_coords=500)}

    short = replace(cfg, lr_schedule=LrSchedule("constant", 32 * 1000, 32 * 50))
    train(short, checkpoint_dir=tmp_path, stop_tokens=32 * 100)
    state = TrainState.load(next(tmp_path.glob("ckpt_*.tjl")))
    worst["100 steps"] = grad_check(state.params, batch.inputs, batch.targets, n_coords=500, seed=1)

    train(short, checkpoint_dir=tmp_path / "full")
    trained = TrainState.load(tmp_path / "full" / "final.tjl")
    assert trained.iteration == 1000
    worst["trained"] = grad_check(trained.params, batch.inputs, batch.targets, n_coords=500, seed=2)
    print({k: f"{v:.2e}" for k, v in worst.items()})
    assert max(worst.values()) < 1e-4
    assert time.perf_counter() - start < 60


# -- 2 ------------------------------------------------------------------------

def _scalar_step(w, g, lr, lam, eps=1e-8):
    cfg = ModelConfig(vocab_size=2, context_k=1, embed_dim=1, num_blocks=0)
    p = ParamSet(cfg, {n: np.full(s, w) for n, s in cfg.shapes().items()})
    grads = ParamSet(cfg, {n: np.full(s, g) for n, s in cfg.shapes().items()})
    adamw_step(p, grads, AdamState.fresh(p), lr, OptimConfig(peak_lr=lr, weight_decay=lam, adam_eps=eps))
    return float(p["head"][0, 0])


@pytest.mark.criterion(2, "AdamW hand example (0.89, lambda=0 variant) and pure-decay shrinkage")
def test_optimizer_oracle():
    # mhat = 0.5, vhat = 0.25 after one step from a fresh state
    assert abs(_scalar_step(1.0, 0.5, 0.1, 0.1) - (1 - 0.1 * 0.5 / (0.5 + 1e-8) - 0.01)) < 1e-12
    assert abs(_scalar_step(1.0, 0.5, 0.1, 0.0) - (1 - 0.1 * 0.5 / (0.5 + 1e-8))) < 1e-12
    assert abs(_scalar_step(1.0, 0.5, 0.1, 0.1, eps=0.0) - 0.89) < 1e-12
    assert abs(_scalar_step(1.0, 0.5, 0.1, 0.0, eps=0.0) - 0.9) < 1e-12

    p = init_params(desk_config().model, 3)
    start = p.copy()
    state = AdamState.fresh(p)
    zero = ParamSet.zeros(p.config)
    oc = OptimConfig(peak_lr=0.01, weight_decay=0.4)
    for _ in range(50):
        adamw_step(p, zero, state, 0.01, oc)
    for name, w in p.items():
        factor = (1 - 0.01 * 0.4) ** 50 if oc.decays(name) else 1.0
        np.testing.assert_allclose(w, start[name] * factor, rtol=0, atol=1e-12)


# -- 3 ------------------------------------------------------------------------

@pytest.mark.criterion(3, "GNS within 5% on a Gaussian stream; identity preconditioner equals plain GNS")
def test_gns_estimator():
    start = time.perf_counter()
    dim, sigma = 1000, 0.1
    est = smooth([estimate_step(s) for s in gaussian_stream(2000, dim=dim, sigma=sigma)], 100.0)[-1]
    truth = dim * sigma**2
    assert est.tr_noise == pytest.approx(truth, rel=0.05)
    assert est.gnorm2 == pytest.approx(truth, rel=0.05)

    pre = [estimate_step(s) for s in gaussian_stream(300, vhat=np.ones(dim), eps=0.0, seed=5)]
    plain = [estimate_step(s) for s in gaussian_stream(300, vhat=None, seed=5)]
    assert pre == plain
    a, b = smooth(pre, 100.0)[-1], smooth(plain, 100.0)[-1]
    assert (a.tr_noise, a.gnorm2, a.b_precond) == (b.tr_noise, b.gnorm2, b.b_precond)
    assert time.perf_counter() - start < 60


# -- 4 ------------------------------------------------------------------------

@pytest.mark.criterion(4, "relative distance examples and properties over 100 random pairs")
def test_relative_distance_oracle():
    assert rel_distance([3, 4, 5, 6], [3, 4, 5, 6]) == 0.0
    assert abs(rel_distance([1, 1], [0, 0]) - math.sqrt(2)) < 1e-12
    a2 = np.array([0.36, 0.48, 0.8]) / np.linalg.norm([0.36, 0.48, 0.8])
    assert abs(rel_distance(2 * a2, a2) - 1 / math.sqrt(2.5)) < 1e-12

    rng = np.random.default_rng(0)
    for _ in range(100):
        n = int(rng.integers(5, 200))
        a, b = rng.normal(3, 1, n), rng.normal(3, 1, n)
        c = float(rng.choice([-1, 1]) * 10 ** rng.uniform(-3, 3))
        d = rel_distance(a, b)
        assert d >= 0 and d == pytest.approx(rel_distance(b, a), rel=1e-12)
        assert rel_distance(c * a, c * b) == pytest.approx(d, rel=1e-9)
    curves = [Curve(np.arange(50.0), rng.normal(3, 1, 50)) for _ in range(6)]
    M = pairwise_matrix(curves).matrix
    assert np.all(np.diag(M) == 0.0) and np.array_equal(M, M.T)


# -- 5 ------------------------------------------------------------------------

@pytest.mark.criterion(5, "power-law, ELR-law, paraboloid and scaling-law fitting oracles")
def test_fitting_oracles():
    t = np.linspace(200, 20_000, 100)
    clean = 2 + 9 * (1e-3 * t) ** -0.5
    noisy = clean * (1 + 0.01 * np.random.default_rng(0).normal(size=t.size))
    for y, tol in ((clean, 0.01), (noisy, 0.05)):
        fit = fit_run_power_law(t, y, eta=1e-3)
        assert fit["L0"] == pytest.approx(2, rel=tol)
        assert fit["A"] == pytest.approx(9, rel=tol)
        assert fit["alpha"] == pytest.approx(0.5, rel=tol)

    L0 = fit_L0_elr(1.9585 + 9.2613 * GAMMAS**0.4604, GAMMAS)
    for name, true in (("L01", 1.9585), ("L02", 9.2613), ("L03", 0.4604)):
        assert L0[name] == pytest.approx(true, rel=0.01)
    G = fit_noise_elr(15.6582 * GAMMAS**0.3561, GAMMAS)
    assert G["G1"] == pytest.approx(15.6582, rel=0.01)
    assert G["G2"] == pytest.approx(0.3561, rel=0.01)

    X, Y = np.meshgrid(np.arange(-12, -7.0), np.arange(-5, 0.0), indexing="ij")
    X, Y = X.ravel(), Y.ravel()
    par = fit_paraboloid(2.0**X, 2.0**Y, 1 + (X + 10) ** 2 + 2 * (Y + 3) ** 2)
    assert par.residual_norm < 1e-9
    np.testing.assert_allclose(par.eigenvalues, [4, 2], atol=1e-9)
    np.testing.assert_allclose(par.x_star, [-10, -3], atol=1e-9)

    Ds = [1e6, 4e6, 1.6e7, 6.4e7, 2.56e8]
    opt = [Optimum(D, 3e-3 * D**0.05, 0.4 * D**-0.3, 3e-3 * D**0.05 * 0.4 * D**-0.3, 2 + 5 * D**-0.5) for D in Ds]
    laws = fit_scaling_laws(opt)
    assert laws.eta["exponent"] == pytest.approx(0.05, abs=1e-6)
    assert laws.lam["exponent"] == pytest.approx(-0.3, abs=1e-6)
    assert laws.gamma["exponent"] == pytest.approx(-0.25, abs=1e-6)
    assert laws.loss["E"] == pytest.approx(2, rel=0.01)


# -- 6 ------------------------------------------------------------------------

@pytest.mark.criterion(6, "decay prediction gives 2.9 on the arithmetic fixture and L when the noise is 0")
def test_decay_prediction_formula():
    assert decayed_loss(3.0, 0.5, 16, 12.8) == 2.9
    cfg = tiny_config(steps=120, eta=0.5, batch=16)
    tokens = [16 * i for i in range(20, 121, 20)]
    for noise, expect in ((12.8, 2.9), (0.0, 3.0)):  # (eta / B) * tr_noise = 0.4 or 0
        rec = fake_record(cfg, tokens, [3.0] * len(tokens), gns_tr_noise=noise, gns_valid=True)
        assert predict_decay_gain(rec, tau_series(rec)[-2]).predicted == expect


# -- 7 ------------------------------------------------------------------------

@pytest.mark.criterion(7, "repeated runs bitwise identical; resume equals uninterrupted training")
def test_determinism_and_resume(tmp_path):
    cfg = replace(desk_config(), lr_schedule=LrSchedule("constant", 32 * 400, 32 * 100), eval_every_tokens=32 * 50,
                  data=replace(desk_config().data, val_examples=2048))
    a, b = train(cfg), train(cfg)
    assert a.metrics_jsonl() == b.metrics_jsonl()
    train(cfg, checkpoint_dir=tmp_path, stop_tokens=32 * 250)
    rest = resume(next(tmp_path.glob("ckpt_*.tjl")), checkpoint_dir=tmp_path / "r")
    assert rest.metrics_jsonl() == "".join(p.to_json() + "\n" for p in a.points if p.tokens > 32 * 250)
    left, right = TrainState.load(tmp_path / "r" / "final.tjl"), TrainState.fresh(cfg)
    run_loop(right, RunRecord(cfg))
    for name, w in left.params.items():
        assert np.array_equal(w, right.params[name])


# -- 8 ------------------------------------------------------------------------

@pytest.mark.criterion(8, "early-stage LR invariance: two weight decays, distance < 0.01 over 200 steps")
def test_early_lr_invariance():
    base = desk_config()
    warm = base.lr_schedule.warmup_tokens
    B = base.bs_schedule.batch_size
    cfg = replace(base, lr_schedule=LrSchedule("constant", warm + 200 * B, warm), eval_every_tokens=10 * B)
    recs = [train(cfg.with_hparams(eta=2.0**-8, lam=lam)) for lam in (0.05, 0.1)]
    assert all(r.status == COMPLETED for r in recs)
    curves = []
    for r in recs:
        pts = [p for p in r.points if p.val_loss is not None and p.tokens > warm]
        curves.append(np.array([p.val_loss for p in pts]))
    assert len(curves[0]) == len(curves[1]) == 20
    d = rel_distance(*curves)
    print(f"early-stage distance {d:.2e}")
    assert d < 0.01


# -- 9 ------------------------------------------------------------------------

ELR_GROUPS = [
    [(2.0**-9, 0.1), (2.0**-8, 0.05), (2.0**-7, 0.025)],
    [(2.0**-9, 0.2), (2.0**-8, 0.1), (2.0**-7, 0.05)],
    [(2.0**-9, 0.4), (2.0**-8, 0.2), (2.0**-7, 0.1)],
]


@pytest.fixture(scope="module")
def elr_sweep(tmp_path_factory):
    root = os.environ.get("TRAJLAB_ACCEPTANCE_REGISTRY")
    root = Path(root) if root else tmp_path_factory.mktemp("elr-registry")
    spec = SweepSpec(desk_config(), pairs=[p for g in ELR_GROUPS for p in g])
    start = time.perf_counter()
    res = run_sweep(spec, Registry(root))
    return res, root, time.perf_counter() - start


@pytest.mark.criterion(9, "end-to-end invariance pipeline on 3 ELR groups x 3; permutation control not invariant")
def test_invariance_pipeline(elr_sweep, capsys):
    res, root, elapsed = elr_sweep
    recs = list(res.records.values())
    assert len(recs) == 9 and all(r.status == COMPLETED for r in recs)
    assert all(r.points[-1].iter >= 20_000 and r.config.bs_schedule.batch_size == 32 for r in recs)
    assert elapsed < 3600

    total = recs[0].config.total_tokens
    warm = recs[0].config.lr_schedule.warmup_tokens
    lines = []
    for label, lo, halflife in (("post-warmup raw", warm, 0.0), ("late half raw", total / 2, 0.0),
                                ("late half smoothed", total / 2, 32_000.0)):
        grid = np.linspace(lo, total, 200)
        curves = align_and_smooth(recs, grid, "val_loss", halflife)
        pw = pairwise_matrix(curves)
        gm = group_distance(curves, "elr", pairwise=pw.matrix)
        verdict = detect_invariance(curves, "elr", pairwise=pw.matrix)
        control = detect_invariance(shuffled_labels(curves, "elr", seed=0), "elr", pairwise=pw.matrix)
        assert pw.matrix.shape == (9, 9) and np.array_equal(pw.matrix, pw.matrix.T)
        assert gm.matrix.shape == (3, 3) and np.all(np.isfinite(gm.matrix))
        assert not control.invariant
        by_lr = detect_invariance(curves, "lr", pairwise=pw.matrix)
        lines.append(f"{label}: {verdict.summary()}; by lr: {by_lr.summary()}; control: {control.summary()}")
        for g in verdict.groups:
            lines.append(f"    gamma={g.key:.4g} within={g.within:.2e} across={g.across:.2e}")

    out = Path(root) / "report-invariance"
    code = cli_main(["analyze", "invariance", "--registry", str(root), "--out", str(out), "--runs", *res.records,
                     "--window", f"{total / 2}:{total}"])
    assert code == 0
    assert (out / "pairwise.csv").is_file() and (out / "groups.csv").is_file()
    with capsys.disabled():
        print("\n" + "\n".join(lines) + f"\n  sweep time {elapsed:.0f}s, report in {out}")


# -- 10 -----------------------------------------------------------------------

@pytest.mark.criterion(10, "WSD boundary values and small/large/mixed batch regimes")
def test_schedules_and_regimes():
    warm = LrSchedule("constant", total_tokens=10**8, warmup_tokens=10**6)
    assert lr_at(warm, 5 * 10**5, 1e-3) == 1e-3 / 2
    assert lr_at(warm, (10**6 + 10**8) // 2, 1e-3) == 1e-3
    wsd = LrSchedule("wsd", total_tokens=10**8, warmup_tokens=10**6, decay_tokens=5 * 10**6)
    assert lr_at(wsd, 10**8 - 25 * 10**5, 1e-3) == 1e-3 / 2

    assert classify_batch_regime([600.0, 900.0, 700.0], 512) == BatchRegime.SMALL
    assert classify_batch_regime([100.0, 300.0, 200.0], 512) == BatchRegime.LARGE
    assert classify_batch_regime([100.0, 900.0, 700.0], 512) == BatchRegime.MIXED
    assert classify_batch_regime([100.0, 900.0], [64, 8192]) == BatchRegime.MIXED
    assert classify_batch_regime([100.0, 1.0, 900.0], 512, valid=[True, False, True]) == BatchRegime.MIXED
    assert classify_batch_regime([600.0, 1.0, 900.0], 512, valid=[True, False, True]) == BatchRegime.SMALL
