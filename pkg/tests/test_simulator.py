import math

import numpy as np
import pytest

from asafl.data import gen_synthetic, partition_noniid, train_test_split
from asafl.models import build_family
from asafl.profiles import CANONICAL_MID, ResourceProfile, generate_fleet
from asafl.simulator import (CheckpointError, RoundFailure, SimConfig, apply_dropout, checkpoint_restore,
                             checkpoint_save, fill_synchronization, objective_scalar, run_experiment,
                             run_fedavg, simulate_times, write_round_logs)
from asafl.training import TrainConfig

HASH = "ab" * 32


@pytest.fixture(scope="module")
def setup():
    full = gen_synthetic(600, 4, 10, 4.0, 0)
    train, test = train_test_split(full, 0.25, 0)
    fleet = generate_fleet(6, seed=0)
    shards = partition_noniid(train.labels, 6, 0.5, 0)
    family = build_family(10, 4, [[8], [16], [32]])
    return fleet, family, train, test, shards


def cfg(**kw):
    base = dict(rounds=6, seed=0, early_stop=False, train=TrainConfig(0.1, batch_size=32))
    base.update(kw)
    return SimConfig(**base)


def test_config_rejects_bad_weights():
    with pytest.raises(ValueError, match="convex combination"):
        SimConfig(objective_weights=(0.5, 0.5, 0.5))
    with pytest.raises(ValueError):
        SimConfig(dropout_p=1.5)
    with pytest.raises(ValueError):
        SimConfig(force_rung=3)


def test_dropout_seeded_and_extremes():
    assert apply_dropout(range(10), 0.0, 1, 1) == list(range(10))
    assert apply_dropout(range(10), 1.0, 1, 1) == []
    assert apply_dropout(range(50), 0.3, 4, 2) == apply_dropout(range(50), 0.3, 4, 2)


def test_times_by_hand():
    tm = simulate_times(CANONICAL_MID, 1000, 50, 2, kappa=6, overhead=0.05)
    assert tm["compute"] == pytest.approx(6 * 2 * 50 * 1000 / CANONICAL_MID.effective_flops)
    assert tm["communication"] == pytest.approx(8 * 1000 / CANONICAL_MID.bandwidth_bytes)
    times = {0: dict(tm), 1: {"compute": 1.0, "communication": 1.0, "synchronization": 0.0, "overhead": 0.05}}
    fill_synchronization(times, {0: 0, 1: 0})
    assert times[1]["synchronization"] == 0.0
    assert times[0]["synchronization"] == pytest.approx(2.0 - tm["compute"] - tm["communication"])


def test_objective_scalar():
    assert objective_scalar(2.0, [0.2, 0.4], 50, 100, (0.5, 0.25, 0.25)) == pytest.approx(
        1.0 + 0.25 * 0.01 + 0.125)


def test_logs_consistent(setup):
    fleet, family, train, test, shards = setup
    res = run_experiment(cfg(), fleet, family, train, shards, test)
    assert [lg.round for lg in res.logs] == list(range(1, 7))
    for lg in res.logs:
        assert sorted(d.device_id for d in lg.devices) == lg.active
        for d in lg.devices:
            assert d.bytes_down == 4 * family.param_count(d.rung_down)
            assert d.bytes_up == 4 * family.param_count(d.rung_up)
            assert not math.isnan(d.utility)
    assert res.logs[-1].accuracy > 0.5


def test_rung_tracks_tier_and_monitor(setup):
    fleet, family, train, test, shards = setup
    res = run_experiment(cfg(rounds=1), fleet, family, train, shards, test)
    for d in res.logs[0].devices:
        assert d.rung_down == res.tiers[d.cluster].rung


def test_deterministic_logs(setup):
    fleet, family, train, test, shards = setup
    a = run_experiment(cfg(dropout_p=0.3), fleet, family, train, shards, test)
    b = run_experiment(cfg(dropout_p=0.3), fleet, family, train, shards, test)
    assert [lg.to_json() for lg in a.logs] == [lg.to_json() for lg in b.logs]
    assert a.model.params.tobytes() == b.model.params.tobytes()


def test_full_dropout_keeps_model(setup):
    fleet, family, train, test, shards = setup
    res = run_experiment(cfg(rounds=2, dropout_p=1.0), fleet, family, train, shards, test)
    assert all(lg.devices == [] and lg.bytes == 0 for lg in res.logs)


def test_stragglers_excluded(setup):
    fleet, family, train, test, shards = setup
    res = run_experiment(cfg(rounds=1, tau_max=0.0), fleet, family, train, shards, test)
    assert res.logs[0].stragglers == list(range(6)) and res.logs[0].bytes == 0


def test_fedavg_equivalence(setup):
    fleet, family, train, test, shards = setup
    sim = cfg(k=1, n_min=1, force_rung=2, adaptive=False, rounds=4)
    a = run_experiment(sim, fleet, family, train, shards, test)
    b = run_fedavg(sim, fleet, family, train, shards, test)
    assert a.model.params.tobytes() == b.model.params.tobytes()


def test_early_stop(setup):
    fleet, family, train, test, shards = setup
    res = run_experiment(cfg(rounds=50, early_stop=True, conv_window=4, conv_threshold=0.5),
                         fleet, family, train, shards, test)
    assert res.stopped_early and len(res.logs) == 4


def test_checkpoint_roundtrip_and_resume(setup, tmp_path):
    fleet, family, train, test, shards = setup
    full = run_experiment(cfg(rounds=6), fleet, family, train, shards, test)
    path = tmp_path / "ck.bin"
    run_experiment(cfg(rounds=3), fleet, family, train, shards, test, config_hash=HASH, checkpoint_path=path)
    state = checkpoint_restore(path, HASH)
    assert state.round == 3
    resumed = run_experiment(cfg(rounds=6), fleet, family, train, shards, test, resume=state)
    assert [lg.to_json() for lg in resumed.logs] == [lg.to_json() for lg in full.logs]
    assert resumed.model.params.tobytes() == full.model.params.tobytes()


def test_checkpoint_rejects_corruption(setup, tmp_path):
    fleet, family, train, test, shards = setup
    path = tmp_path / "ck.bin"
    run_experiment(cfg(rounds=1), fleet, family, train, shards, test, config_hash=HASH, checkpoint_path=path)
    with pytest.raises(CheckpointError):
        checkpoint_restore(path, "cd" * 32)
    blob = bytearray(path.read_bytes())
    blob[50] ^= 0xFF
    path.write_bytes(bytes(blob))
    with pytest.raises(CheckpointError):
        checkpoint_restore(path)
    path.write_bytes(b"nope")
    with pytest.raises(CheckpointError):
        checkpoint_restore(path)


def test_round_retry_then_failure(setup, tmp_path):
    fleet, family, train, test, shards = setup
    calls = []

    def flaky(t):
        calls.append(t)
        if t == 2 and calls.count(2) == 1:
            raise RuntimeError("transient")

    clean = run_experiment(cfg(rounds=3), fleet, family, train, shards, test)
    retried = run_experiment(cfg(rounds=3), fleet, family, train, shards, test, fault_hook=flaky)
    assert [lg.to_json() for lg in retried.logs] == [lg.to_json() for lg in clean.logs]

    def broken(t):
        if t == 2:
            raise RuntimeError("persistent")

    path = tmp_path / "ck.bin"
    with pytest.raises(RoundFailure):
        run_experiment(cfg(rounds=3), fleet, family, train, shards, test, config_hash=HASH,
                       checkpoint_path=path, fault_hook=broken)
    assert checkpoint_restore(path, HASH).round == 1


def test_adaptive_downgrades_overloaded_device(setup):
    _, family, train, test, shards = setup
    weak = ResourceProfile(1, 1.0, 0, 1.0, 16, 5, 100, 0.8)
    strong = ResourceProfile(8, 3.0, 1, 16.0, 256, 100, 10, 0.99)
    fleet = [strong, strong, weak, weak, strong, weak]
    res = run_experiment(cfg(rounds=3, k=1, n_min=1, force_rung=2), fleet, family, train, shards, test)
    for d in res.logs[0].devices:
        if fleet[d.device_id] is weak:
            assert "DOWN" in d.adjustments
    assert all(res.rungs[d] < 2 for d in (2, 3, 5))


def test_write_round_logs(setup, tmp_path):
    fleet, family, train, test, shards = setup
    res = run_experiment(cfg(rounds=2), fleet, family, train, shards, test)
    path = tmp_path / "r.ndjson"
    write_round_logs(res.logs, path, "# hdr")
    lines = path.read_text().splitlines()
    assert lines[0] == "# hdr" and len(lines) == 3
