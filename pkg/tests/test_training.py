import itertools

import numpy as np
import pytest

from asafl.models import Direction, ModelArch, build_family, forward, init_params, loss_and_grad
from asafl.profiles import CANONICAL_MID, ResourceProfile
from asafl.training import (DemandTable, MonitorState, ResourceThresholds, TrainConfig, UsageSample,
                            local_train, lr_schedule, monitor_and_adjust, prox_objective, run_monitor,
                            simulate_usage)


def test_lr_schedule_examples():
    for mode in ("constant", "inv_sqrt", "inv_t"):
        assert lr_schedule(1, TrainConfig(lr0=0.01, schedule=mode)) == 0.01
    assert lr_schedule(4, TrainConfig(lr0=0.01, schedule="inv_sqrt")) == pytest.approx(0.005)
    assert lr_schedule(10, TrainConfig(lr0=0.01, schedule="inv_t")) == pytest.approx(0.001)
    with pytest.raises(ValueError):
        lr_schedule(0, TrainConfig())


def test_config_validation():
    with pytest.raises(ValueError):
        TrainConfig(lr0=0)
    with pytest.raises(ValueError):
        TrainConfig(schedule="cosine")
    assert TrainConfig(local_epochs=5, max_local_epochs=2).effective_epochs == 2
    with pytest.raises(ValueError):
        ResourceThresholds(cpu=1.5)


@pytest.fixture
def blob():
    rng = np.random.default_rng(0)
    X = np.vstack([rng.normal(-2, 0.5, (40, 2)), rng.normal(2, 0.5, (40, 2))])
    return X, np.repeat([0, 1], 40)


def test_zero_epochs_is_noop(blob):
    arch = ModelArch(0, (2, 2))
    w = np.arange(6, dtype=float) / 10
    res = local_train(w, arch, *blob, TrainConfig(local_epochs=0))
    assert np.array_equal(res.params, w)
    assert res.loss == pytest.approx(forward(arch, w, *blob)[1])


def test_linear_descent(blob):
    arch = ModelArch(0, (2, 2))
    w = np.zeros(6)
    res = local_train(w, arch, *blob, TrainConfig(lr0=0.05, batch_size=16, local_epochs=5))
    assert forward(arch, res.params, *blob)[1] < forward(arch, w, *blob)[1]


def test_local_train_bit_reproducible(blob):
    arch = ModelArch(0, (2, 3, 2))
    w = np.random.default_rng(1).normal(size=17)
    cfg = TrainConfig(lr0=0.1, batch_size=8, local_epochs=3)
    a = local_train(w, arch, *blob, cfg, seed=(5, 2, 1))
    b = local_train(w, arch, *blob, cfg, seed=(5, 2, 1))
    assert a.params.tobytes() == b.params.tobytes()


def test_split_epochs_match_single_call(blob):
    arch = ModelArch(0, (2, 3, 2))
    w = np.random.default_rng(1).normal(size=17)
    cfg = TrainConfig(lr0=0.1, batch_size=8, local_epochs=3)
    whole = local_train(w, arch, *blob, cfg, seed=(5, 2, 1))
    part = w
    for e in range(3):
        part = local_train(part, arch, *blob, cfg, seed=(5, 2, 1), first_epoch=e, epochs=1).params
    assert whole.params.tobytes() == part.tobytes()


def test_prox_term_vanishes_at_anchor(blob):
    arch = ModelArch(0, (2, 2))
    w = np.random.default_rng(2).normal(size=6)
    cfg = TrainConfig(lr0=1e-3, batch_size=80, local_epochs=1, prox_mu=1e6)
    res = local_train(w, arch, *blob, cfg, global_ref=w)
    # one full-batch step from the anchor: the proximal gradient is exactly zero there
    expected = w - 1e-3 * loss_and_grad(arch, w, *blob)[1]
    assert np.allclose(res.params, expected, atol=1e-15)
    assert prox_objective(arch, w, *blob, w, 1e6) == pytest.approx(forward(arch, w, *blob)[1])


def test_prox_pulls_toward_anchor(blob):
    arch = ModelArch(0, (2, 2))
    anchor = np.zeros(6)
    free = local_train(anchor, arch, *blob, TrainConfig(lr0=0.1, batch_size=8, local_epochs=3))
    prox = local_train(anchor, arch, *blob, TrainConfig(lr0=0.1, batch_size=8, local_epochs=3, prox_mu=1.0),
                       global_ref=anchor)
    assert np.linalg.norm(prox.params) < np.linalg.norm(free.params)


def test_usage_examples():
    p = ResourceProfile(2, 1.5, 0, 4.0, 64, 30, 30, 0.9)  # cpu capacity 3 core-GHz
    assert simulate_usage(p, 1, 0, DemandTable(cpu=(0, 3.0, 3.0), memory=(0, 4.0, 4.0)), 0).cpu == 1.0
    zero = simulate_usage(p, 0, 0, DemandTable(cpu=(0, 1, 1), memory=(0, 1, 1)), 0)
    assert zero.cpu == 0.0 and zero.memory == 0.0
    # canonical mid (8 core-GHz, 3 GB) on the complex rung: 7.6/8 and 2.85/3
    mid = simulate_usage(CANONICAL_MID, 2, 0, noise_sd=0)
    assert mid.cpu == pytest.approx(0.95) and mid.memory == pytest.approx(0.95)


def test_usage_seeded():
    a = simulate_usage(CANONICAL_MID, 1, [1, 2, 3])
    b = simulate_usage(CANONICAL_MID, 1, [1, 2, 3])
    assert a == b


def test_monitor_examples():
    th = ResourceThresholds()
    assert monitor_and_adjust(UsageSample(0.95, 0.1), th, MonitorState())[0] is Direction.DOWN
    assert run_monitor([UsageSample(0.5, 0.5)] * 3, th) == [Direction.HOLD, Direction.HOLD, Direction.UP]
    assert monitor_and_adjust(UsageSample(0.9, 0.9), th, MonitorState())[0] is Direction.HOLD


def reference_monitor(seq, threshold):
    out, stable = [], 0
    for cpu, mem in seq:
        if cpu > threshold or mem > threshold:
            out.append(Direction.DOWN)
            stable = 0
        else:
            stable += 1
            if stable == 3:
                out.append(Direction.UP)
                stable = 0
            else:
                out.append(Direction.HOLD)
    return out


def test_monitor_exhaustive():
    levels = (0.0, 0.5, 0.9, 0.95, 1.0)
    pairs = list(itertools.product(levels, repeat=2))
    th = ResourceThresholds(0.9, 0.9)
    for seq in itertools.product(pairs, repeat=2):
        got = run_monitor([UsageSample(*s) for s in seq], th)
        assert got == reference_monitor(seq, 0.9)
