import json
import math
from dataclasses import replace

import numpy as np
import pytest

from trajlab.checkpoint import CheckpointError, IntegrityError
from trajlab.config import DataConfig, TrainConfig
from trajlab.corpus import entropy_floor
from trajlab.model import ModelConfig, init_params
from trajlab.optim import BsSchedule, LrSchedule, OptimConfig
from trajlab.runner import (
    COMPLETED,
    DIVERGED,
    METRIC_KEYS,
    Registry,
    ResumeSpec,
    SweepSpec,
    TrainState,
    resume,
    run_sweep,
    source_for,
    train,
    train_into,
    validation_data,
)

from conftest import tiny_config


def test_same_config_gives_identical_logs():
    cfg = tiny_config(steps=60)
    a, b = train(cfg), train(cfg)
    assert a.metrics_jsonl() == b.metrics_jsonl()
    assert a.status == COMPLETED


def test_metric_keys_and_token_order():
    rec = train(tiny_config(steps=60))
    for line in rec.metrics_jsonl().splitlines():
        assert tuple(json.loads(line)) == METRIC_KEYS
    toks = [p.tokens for p in rec.points]
    assert all(b > a for a, b in zip(toks, toks[1:]))
    assert toks[-1] == rec.config.total_tokens
    assert rec.points[-1].val_loss is not None


def test_validation_never_below_floor():
    cfg = tiny_config(steps=200, eta=2.0**-5)
    rec = train(cfg)
    floor = entropy_floor(source_for(cfg))
    vals = [p.val_loss for p in rec.points if p.val_loss is not None]
    assert min(vals) >= floor - 1e-6


def test_validation_set_shared_across_hyperparameters():
    a = tiny_config()
    b = a.with_hparams(eta=1e-3, lam=0.3)
    va, vb = validation_data(a), validation_data(b)
    np.testing.assert_array_equal(va[0], vb[0])
    np.testing.assert_array_equal(va[1], vb[1])


def test_zero_learning_rate_leaves_parameters(tmp_path):
    cfg = tiny_config(steps=40, eta=0.0)
    state = TrainState.fresh(cfg)
    from trajlab.runner import RunRecord, run_loop

    run_loop(state, RunRecord(cfg))
    init = init_params(cfg.model, cfg.run_seed)
    for name, arr in state.params.items():
        np.testing.assert_array_equal(arr, init[name])


def test_linear_model_reaches_floor():
    # 164 parameters: a single affine map from a 9-token binary window
    model = ModelConfig(vocab_size=2, context_k=9, embed_dim=4, num_blocks=0)
    assert model.num_params() == 164
    cfg = TrainConfig(
        model=model,
        optim=OptimConfig(peak_lr=2.0**-6, weight_decay=0.0),
        lr_schedule=LrSchedule("constant", 100_000, 3200),
        bs_schedule=BsSchedule.fixed(32),
        data=DataConfig(seed=3, order=1, concentration=1.0, val_examples=4096),
        eval_every_tokens=10_000,
    )
    rec = train(cfg)
    floor = entropy_floor(source_for(cfg))
    assert rec.final.val_loss - floor < 0.01


def test_resume_without_overrides_is_bitwise(tmp_path):
    cfg = tiny_config(steps=60)
    full = train(cfg)
    train(cfg, checkpoint_dir=tmp_path, stop_tokens=cfg.total_tokens // 2)
    ckpt = next(tmp_path.glob("ckpt_*.tjl"))
    rest = resume(ckpt)
    tail = [p for p in full.points if p.tokens > cfg.total_tokens // 2]
    assert rest.metrics_jsonl() == "".join(p.to_json() + "\n" for p in tail)


def test_resume_with_new_lr_applies_immediately(tmp_path):
    cfg = tiny_config(steps=60)
    train(cfg, checkpoint_dir=tmp_path, stop_tokens=cfg.total_tokens // 2)
    ckpt = next(tmp_path.glob("ckpt_*.tjl"))
    rec = resume(ckpt, {"peak_lr": 1e-3})
    assert rec.points[0].lr == 1e-3
    assert rec.config.resume["tokens"] == cfg.total_tokens // 2


def test_corrupted_checkpoint_refused(tmp_path):
    cfg = tiny_config(steps=40)
    train(cfg, checkpoint_dir=tmp_path, stop_tokens=320)
    ckpt = next(tmp_path.glob("ckpt_*.tjl"))
    raw = bytearray(ckpt.read_bytes())
    raw[100] ^= 0xFF
    ckpt.write_bytes(bytes(raw))
    with pytest.raises(IntegrityError):
        resume(ckpt)


def test_model_shape_override_refused(tmp_path):
    cfg = tiny_config(steps=40)
    train(cfg, checkpoint_dir=tmp_path, stop_tokens=320)
    ckpt = next(tmp_path.glob("ckpt_*.tjl"))
    wider = replace(cfg.model, embed_dim=cfg.model.embed_dim * 2)
    with pytest.raises(CheckpointError, match="shape"):
        resume(ckpt, {"model": wider})


def _grid_spec(**kw):
    return SweepSpec(tiny_config(steps=40), etas=[2.0**-7, 2.0**-6], lambdas=[0.05, 0.1], **kw)


def test_sweep_hashes_and_skip(tmp_path):
    reg = Registry(tmp_path / "reg")
    first = run_sweep(_grid_spec(), reg)
    assert len(set(first.records)) == 4
    assert len(first.executed) == 4 and not first.skipped
    again = run_sweep(_grid_spec(), reg)
    assert not again.executed and len(again.skipped) == 4
    gone = first.executed[2]
    import shutil

    shutil.rmtree(reg.path(gone))
    third = run_sweep(_grid_spec(), reg)
    assert third.executed == [gone]


def test_parallel_sweep_matches_serial(tmp_path):
    serial = run_sweep(_grid_spec(), Registry(tmp_path / "a"))
    parallel = run_sweep(_grid_spec(), Registry(tmp_path / "b"), workers=2)
    for h, rec in serial.records.items():
        assert parallel.records[h].metrics_jsonl() == rec.metrics_jsonl()


def test_diverged_cell_is_recorded(tmp_path):
    spec = SweepSpec(tiny_config(steps=60, warmup_steps=1), pairs=[(2.0**-6, 0.1), (1e4, 0.0)])
    res = run_sweep(spec, Registry(tmp_path))
    statuses = sorted(r.status for r in res.records.values())
    assert statuses == [COMPLETED, DIVERGED]
    bad = next(r for r in res.records.values() if r.status == DIVERGED)
    assert bad.note


def test_train_into_is_idempotent(tmp_path):
    reg = Registry(tmp_path)
    cfg = tiny_config(steps=40)
    a = train_into(reg, cfg)
    b = train_into(reg, cfg)
    assert a.metrics_jsonl() == b.metrics_jsonl()
    assert reg.hashes() == [cfg.config_hash()]
    assert reg.checkpoint(cfg.config_hash()).is_file()


def test_stronger_decay_gives_smaller_weights():
    norms = []
    for lam in (2.0, 1.0, 0.5):  # eta/lambda increasing
        rec = train(tiny_config(steps=1000, eta=0.02, lam=lam))
        norms.append(rec.final.param_norm)
    assert norms[0] < norms[1] < norms[2]


def test_type1_sweep_resumes_one_source(tmp_path):
    src = tiny_config(steps=60)
    spec = SweepSpec(
        replace(src, bs_schedule=BsSchedule.fixed(64)),
        etas=[2.0**-7, 2.0**-6],
        lambdas=[0.1],
        resume_from=ResumeSpec(src, at_tokens=320, bs_schedule=BsSchedule.fixed(64), extra_tokens=640),
    )
    reg = Registry(tmp_path)
    res = run_sweep(spec, reg)
    assert res.source_hash in reg.hashes()
    for rec in res.records.values():
        assert rec.status == COMPLETED
        assert rec.config.resume["source"] == res.source_hash
        assert rec.points[0].tokens > 320
        assert {p.batch_size for p in rec.points} == {64}
        assert rec.points[-1].tokens == 320 + 640
    spec2 = SweepSpec.from_dict(json.loads(json.dumps(spec.to_dict())))
    assert not run_sweep(spec2, reg).executed


def test_type2_switches_batch_size():
    cfg = tiny_config(steps=60, bs_schedule=BsSchedule.type2(16, 64, 480))
    rec = train(cfg)
    before = {p.batch_size for p in rec.points if p.tokens <= 480}
    # the last step is cut short by the token budget
    after = {p.batch_size for p in rec.points[:-1] if p.tokens > 480 + 64}
    assert before == {16}
    assert after == {64}
    assert math.isclose(rec.points[-1].tokens, cfg.total_tokens)
