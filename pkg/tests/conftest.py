import numpy as np
import pytest

from trajlab.config import DataConfig, TrainConfig
from trajlab.model import ModelConfig
from trajlab.optim import BsSchedule, LrSchedule, OptimConfig

TINY_MODEL = ModelConfig(vocab_size=8, context_k=3, embed_dim=8, num_blocks=1)


def tiny_config(steps=120, batch=16, eta=2.0**-6, lam=0.1, warmup_steps=10, **kw) -> TrainConfig:
    """A run small enough to train in well under a second."""
    base = dict(
        model=TINY_MODEL,
        optim=OptimConfig(peak_lr=eta, weight_decay=lam),
        lr_schedule=LrSchedule("constant", batch * steps, batch * warmup_steps),
        bs_schedule=BsSchedule.fixed(batch),
        data=DataConfig(seed=7, order=2, val_examples=512, backoff=5.0),
        eval_every_tokens=batch * 20,
        log_every_steps=5,
    )
    base.update(kw)
    return TrainConfig(**base)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


def fake_record(config, tokens, values, status="completed", **fields):
    """A RunRecord with a hand-written val_loss series (one point per step at ``tokens``).

    ``fields`` overrides MetricPoint fields for every point, or per point when
    given as a list.
    """
    from trajlab.runner import MetricPoint, RunRecord

    B = config.bs_schedule.batch_size
    points = []
    for i, (t, v) in enumerate(zip(tokens, values)):
        row = dict(iter=int(t) // B, tokens=int(t), train_loss=float(v), val_loss=v, lr=config.eta, batch_size=B,
                   param_norm=1.0, gns_tr_noise=None, gns_gnorm2=None, gns_b_precond=None, gns_valid=False,
                   clip_scale=1.0)
        for k, val in fields.items():
            row[k] = val[i] if isinstance(val, list) else val
        points.append(MetricPoint(**row))
    return RunRecord(config, points, status)


# -- acceptance summary ------------------------------------------------------

_CRITERIA: dict[int, tuple[str, str]] = {}


def pytest_runtest_logreport(report):
    marker = dict(report.user_properties).get("criterion")
    if marker is None:
        return
    n, title = marker
    failed = report.failed
    if report.when == "call" or failed:
        prev = _CRITERIA.get(n, ("PASS", title))[0]
        outcome = "FAIL" if failed or prev == "FAIL" else ("SKIP" if report.skipped else "PASS")
        _CRITERIA[n] = (outcome, title)


def pytest_collection_modifyitems(items):
    for item in items:
        m = item.get_closest_marker("criterion")
        if m is not None:
            item.user_properties.append(("criterion", tuple(m.args)))


def pytest_terminal_summary(terminalreporter):
    if not _CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(_CRITERIA):
        outcome, title = _CRITERIA[n]
        terminalreporter.write_line(f"criterion {n:2d} {outcome}: {title}")
