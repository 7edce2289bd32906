"""Round orchestration: tiering, local training with adjustment, aggregation, logs, checkpoints."""

from __future__ import annotations

import hashlib
import json
import logging
import math
import struct
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from .aggregation import (GlobalModel, Update, check_convergence, fedavg, hierarchical_merge,
                          intra_cluster_aggregate)
from .clustering import ClusterAssignment, Tier, cluster_devices
from .data import Dataset, ShardPlan
from .diagnostics import BYTES_PER_PARAM, eval_metrics
from .models import (Direction, NestedModelFamily, ParamVector, adjust_complexity, deserialize_params,
                     forward, init_params, project_params, serialize_params, utility)
from .profiles import DeviceRecord, ResourceProfile, ScoringWeights, Workload, profile_fleet
from .training import (DemandTable, MonitorState, ResourceThresholds, TrainConfig, local_train,
                       monitor_and_adjust, simulate_usage)

log = logging.getLogger(__name__)

KAPPA = 6.0  # forward + backward flops per sample per parameter


@dataclass(frozen=True)
class SimConfig:
    rounds: int = 250
    k: int = 3
    n_min: int = 2
    cluster_on: str = "score"
    dropout_p: float = 0.0
    tau_max: float = math.inf
    objective_weights: tuple = (0.5, 0.25, 0.25)
    seed: int = 0
    recluster_every: int = 10
    conv_window: int = 10
    conv_threshold: float = 1e-4
    early_stop: bool = True
    adaptive: bool = True
    force_rung: int | None = None
    overhead_s: float = 0.05
    kappa: float = KAPPA
    usage_noise_sd: float = 0.02
    thresholds: ResourceThresholds = ResourceThresholds()
    demand: DemandTable = DemandTable()
    train: TrainConfig = TrainConfig()
    kmeans_max_iter: int = 100

    def __post_init__(self):
        a = np.asarray(self.objective_weights, dtype=float)
        if a.shape != (3,) or np.any(a < 0) or abs(a.sum() - 1.0) > 1e-9:
            raise ValueError("objective weights must be a convex combination: three non-negative "
                             f"values summing to 1, got {tuple(self.objective_weights)}")
        if not 0.0 <= self.dropout_p <= 1.0:
            raise ValueError("dropout_p must lie in [0, 1]")
        if self.rounds < 0 or self.k < 1:
            raise ValueError("rounds must be >= 0 and k >= 1")
        if self.force_rung not in (None, 0, 1, 2):
            raise ValueError("force_rung must be 0, 1, 2 or None")
        if self.cluster_on not in ("score", "features"):
            raise ValueError("cluster_on must be 'score' or 'features'")


@dataclass
class DeviceLog:
    device_id: int
    cluster: int
    rung_down: int
    rung_up: int
    loss: float
    grad_sq: float
    usage_cpu: float
    usage_memory: float
    adjustments: list
    bytes_up: int
    bytes_down: int
    times: dict
    sample_param_ops: int = 0
    utility: float = float("nan")


@dataclass
class RoundLog:
    round: int
    active: list
    stragglers: list
    devices: list
    cluster_losses: dict
    global_loss: float
    objective: float
    accuracy: float = float("nan")
    auc: float = float("nan")

    @property
    def bytes(self) -> int:
        return sum(d.bytes_up + d.bytes_down for d in self.devices)

    def to_dict(self) -> dict:
        out = asdict(self)
        out["cluster_losses"] = {str(c): v for c, v in self.cluster_losses.items()}
        return out

    @classmethod
    def from_dict(cls, raw: dict) -> "RoundLog":
        raw = dict(raw)
        raw["devices"] = [DeviceLog(**d) for d in raw["devices"]]
        raw["cluster_losses"] = {int(c): v for c, v in raw["cluster_losses"].items()}
        return cls(**raw)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True, allow_nan=True)


@dataclass
class SimState:
    round: int
    params: np.ndarray
    rungs: list
    monitors: list
    loss_history: list
    logs: list
    stopped: bool = False

    def copy(self) -> "SimState":
        return SimState(self.round, self.params.copy(), list(self.rungs), list(self.monitors),
                        list(self.loss_history), list(self.logs), self.stopped)


@dataclass
class ExperimentResult:
    model: GlobalModel
    logs: list
    assignment: ClusterAssignment | None
    tiers: dict
    records: list
    rungs: list
    stopped_early: bool = False


class RoundFailure(RuntimeError):
    pass


# -- round mechanics --------------------------------------------------------

def apply_dropout(active: Sequence[int], p: float, seed: int, round_t: int) -> list[int]:
    """Drop each device independently with probability p, seeded by (seed, round)."""
    if not 0.0 <= p <= 1.0:
        raise ValueError("dropout probability must lie in [0, 1]")
    active = sorted(active)
    draws = np.random.default_rng([seed, round_t]).random(len(active))
    return [d for d, u in zip(active, draws) if u >= p]


def simulate_times(profile: ResourceProfile, n_params: int, shard_size: int, local_epochs: int,
                   kappa: float = KAPPA, overhead: float = 0.05) -> dict:
    """Simulated seconds; synchronization is filled in once the cluster is known."""
    return {
        "compute": kappa * local_epochs * shard_size * n_params / profile.effective_flops,
        "communication": 2 * BYTES_PER_PARAM * n_params / profile.bandwidth_bytes,
        "synchronization": 0.0,
        "overhead": overhead,
    }


def fill_synchronization(times: dict, clusters: dict) -> None:
    """Each device waits for the slowest member of its cluster."""
    groups: dict = {}
    for device, cluster in clusters.items():
        groups.setdefault(cluster, []).append(device)
    for members in groups.values():
        busy = {d: times[d]["compute"] + times[d]["communication"] for d in members}
        slowest = max(busy.values())
        for d in members:
            times[d]["synchronization"] = slowest - busy[d]


def objective_scalar(global_loss: float, usages: Sequence[float], round_bytes: int, fedavg_bytes: int,
                     weights: Sequence[float]) -> float:
    """a1 * task loss + a2 * usage variance + a3 * bytes relative to FedAvg."""
    a1, a2, a3 = weights
    resource = float(np.var(usages)) if len(usages) else 0.0
    comm = round_bytes / fedavg_bytes if fedavg_bytes else 0.0
    return a1 * global_loss + a2 * resource + a3 * comm


def _evaluate(family, params, train_X, train_y, test: Dataset | None):
    loss = forward(family.archs[2], params, train_X, train_y)[1]
    if test is None or len(test) == 0:
        return loss, float("nan"), float("nan")
    metrics = eval_metrics(params, family.archs[2], test.features, test.labels, test.classes)
    return loss, metrics["accuracy"], metrics["auc"]


# -- checkpoints ------------------------------------------------------------

MAGIC = b"ASA1"
CHECKPOINT_VERSION = 1


class CheckpointError(ValueError):
    pass


def checkpoint_save(state: SimState, path, config_hash: str) -> None:
    payload = json.dumps({
        "round": state.round,
        "rungs": state.rungs,
        "monitors": [[m.stable_epochs, m.last_direction.value] for m in state.monitors],
        "loss_history": state.loss_history,
        "logs": [lg.to_dict() for lg in state.logs],
        "stopped": state.stopped,
    }, sort_keys=True).encode()
    body = (MAGIC + struct.pack("<H", CHECKPOINT_VERSION) + bytes.fromhex(config_hash)
            + struct.pack("<I", len(payload)) + payload
            + serialize_params(ParamVector(state.params, 2)))
    checksum = hashlib.blake2b(body, digest_size=8).digest()
    tmp = Path(str(path) + ".tmp")
    tmp.write_bytes(body + checksum)
    tmp.replace(path)


def checkpoint_restore(path, config_hash: str | None = None) -> SimState:
    blob = Path(path).read_bytes()
    if len(blob) < 4 + 2 + 32 + 4 + 8 or blob[:4] != MAGIC:
        raise CheckpointError(f"{path}: not a checkpoint file")
    body, checksum = blob[:-8], blob[-8:]
    if hashlib.blake2b(body, digest_size=8).digest() != checksum:
        raise CheckpointError(f"{path}: checksum mismatch, file is corrupt")
    (version,) = struct.unpack_from("<H", body, 4)
    if version != CHECKPOINT_VERSION:
        raise CheckpointError(f"{path}: unsupported checkpoint version {version}")
    stored_hash = body[6:38].hex()
    if config_hash is not None and stored_hash != config_hash:
        raise CheckpointError(f"{path}: written for config {stored_hash[:12]}, current config is {config_hash[:12]}")
    (length,) = struct.unpack_from("<I", body, 38)
    raw = json.loads(body[42:42 + length])
    vector, _ = deserialize_params(body, 42 + length)
    return SimState(
        round=raw["round"],
        params=vector.values,
        rungs=raw["rungs"],
        monitors=[MonitorState(s, Direction(d)) for s, d in raw["monitors"]],
        loss_history=raw["loss_history"],
        logs=[RoundLog.from_dict(r) for r in raw["logs"]],
        stopped=raw["stopped"],
    )


# -- experiment -------------------------------------------------------------

def _nominal_rungs(config: SimConfig, assignment: ClusterAssignment, tiers: dict) -> dict:
    if config.force_rung is not None:
        return {c: config.force_rung for c in range(assignment.k)}
    if tiers:
        return {c: Tier(t).rung for c, t in tiers.items()}
    return {c: 2 for c in range(assignment.k)}


def _cluster_fleet(config: SimConfig, records: list[DeviceRecord]):
    scores = [r.score for r in records]
    points = (np.array(scores)[:, None] if config.cluster_on == "score"
              else np.array([r.normalized_features for r in records]))
    n_min = min(config.n_min, len(records) // config.k)
    return cluster_devices(points, scores, k=config.k, n_min=n_min, seed=config.seed,
                           max_iter=config.kmeans_max_iter)


def run_experiment(config: SimConfig, fleet: Sequence[ResourceProfile], family: NestedModelFamily,
                   train: Dataset, shards: ShardPlan, test: Dataset | None = None,
                   weights: ScoringWeights | None = None, workload: Workload = Workload(),
                   config_hash: str = "0" * 64, checkpoint_path=None, checkpoint_every: int = 0,
                   resume: SimState | None = None,
                   fault_hook: Callable[[int], None] | None = None) -> ExperimentResult:
    """Benchmark, tier, then run rounds of train / monitor / aggregate / evaluate.

    Stragglers (compute + communication above tau_max) are dropped before
    training and move no bytes. A failing round is restored from the state at
    its start and retried once.
    """
    n = len(fleet)
    if sorted(shards.shards) != list(range(n)):
        raise ValueError(f"need one shard per device: {n} devices, shards for {sorted(shards.shards)}")
    records = profile_fleet(fleet, weights, workload)
    assignment, tiers = _cluster_fleet(config, records)
    nominal = _nominal_rungs(config, assignment, tiers)
    labels = [int(c) for c in assignment.labels]

    union = np.sort(np.concatenate([shards.shards[d] for d in range(n)]))
    train_X, train_y = train.features[union], train.labels[union]
    scores = [r.score for r in records]

    if resume is not None:
        state = resume.copy()
    else:
        state = SimState(0, init_params(family, config.seed), [nominal[labels[d]] for d in range(n)],
                         [MonitorState() for _ in range(n)], [], [])

    def run_round(t: int) -> None:
        if fault_hook is not None:
            fault_hook(t)
        nonlocal labels, nominal, assignment, tiers
        if config.recluster_every and t > 1 and (t - 1) % config.recluster_every == 0:
            # only devices whose tier rung changes restart from the new nominal rung
            fresh, fresh_tiers = _cluster_fleet(config, records)
            fresh_nominal = _nominal_rungs(config, fresh, fresh_tiers)
            fresh_labels = [int(c) for c in fresh.labels]
            for d in range(n):
                if fresh_nominal[fresh_labels[d]] != nominal[labels[d]]:
                    state.rungs[d] = fresh_nominal[fresh_labels[d]]
                    state.monitors[d] = MonitorState()
            labels, nominal, assignment, tiers = fresh_labels, fresh_nominal, fresh, fresh_tiers
        active = apply_dropout(range(n), config.dropout_p, config.seed, t)
        times, stragglers, participants = {}, [], []
        for d in active:
            tm = simulate_times(fleet[d], family.param_count(state.rungs[d]), len(shards.shards[d]),
                                config.train.effective_epochs, config.kappa, config.overhead_s)
            if tm["compute"] + tm["communication"] > config.tau_max:
                stragglers.append(d)
            else:
                times[d] = tm
                participants.append(d)
        fill_synchronization(times, {d: labels[d] for d in participants})

        glob = state.params
        prev_acc = state.logs[-1].accuracy if state.logs else float("nan")
        acc_estimate = 0.5 if math.isnan(prev_acc) else prev_acc
        by_cluster: dict = {}
        device_logs = []
        for d in participants:
            idx = shards.shards[d]
            X, y = train.features[idx], train.labels[idx]
            rung_down = rung = state.rungs[d]
            params = glob[family.coord_maps[rung]]
            monitor = state.monitors[d]
            adjustments, usage, result = [], None, None
            epochs = config.train.effective_epochs
            for e in range(max(epochs, 1)):
                anchor = glob[family.coord_maps[rung]]
                result = local_train(params, family.archs[rung], X, y, config.train, anchor, t,
                                     seed=(config.seed, d, t), first_epoch=e,
                                     epochs=1 if epochs else 0)
                params = result.params
                usage = simulate_usage(fleet[d], rung, [config.seed, d, t, e, 1], config.demand,
                                       config.usage_noise_sd)
                direction, monitor = monitor_and_adjust(usage, config.thresholds, monitor)
                adjustments.append(direction.value)
                if config.adaptive and direction is not Direction.HOLD:
                    new_rung = adjust_complexity(rung, direction)
                    if e < epochs - 1:
                        params = project_params(family, rung, new_rung, params, glob)
                        rung = new_rung
                    state.rungs[d] = new_rung
            state.monitors[d] = monitor
            upload = np.asarray(params, dtype=np.float32)
            by_cluster.setdefault(labels[d], []).append(Update(d, rung, upload, len(idx), result.loss))
            device_logs.append(DeviceLog(
                d, labels[d], rung_down, rung, result.loss, result.grad_sq_norm, usage.cpu, usage.memory,
                adjustments, BYTES_PER_PARAM * family.param_count(rung),
                BYTES_PER_PARAM * family.param_count(rung_down), times[d], result.sample_param_ops,
                utility(family, rung_down, scores[d], acc_estimate)))

        cluster_models, cluster_losses = [], {}
        for c in sorted(by_cluster):
            model = intra_cluster_aggregate(by_cluster[c], family, nominal[c], glob, c)
            if model is not None:
                cluster_models.append(model)
                cluster_losses[c] = model.loss
        state.params = hierarchical_merge(cluster_models, family, glob)

        loss, acc, auc = _evaluate(family, state.params, train_X, train_y, test)
        round_bytes = sum(dl.bytes_up + dl.bytes_down for dl in device_logs)
        fedavg_bytes = 2 * BYTES_PER_PARAM * family.param_count(2) * len(device_logs)
        usages = [0.5 * (dl.usage_cpu + dl.usage_memory) for dl in device_logs]
        objective = objective_scalar(loss, usages, round_bytes, fedavg_bytes, config.objective_weights)
        state.logs.append(RoundLog(t, active, stragglers, device_logs, cluster_losses, loss, objective, acc, auc))
        state.loss_history.append(loss)
        state.round = t
        if config.early_stop:
            state.stopped = check_convergence(state.loss_history, config.conv_window, config.conv_threshold)[1]

    while state.round < config.rounds and not state.stopped:
        t = state.round + 1
        snapshot = state.copy()
        try:
            run_round(t)
        except Exception as first:  # restore and retry once
            log.warning("round %d failed (%s); restoring and retrying", t, first)
            state = snapshot
            snapshot = state.copy()
            try:
                run_round(t)
            except Exception as second:
                state = snapshot
                if checkpoint_path is not None:
                    checkpoint_save(state, checkpoint_path, config_hash)
                raise RoundFailure(f"round {t} failed twice: {second!r}") from second
        if checkpoint_path is not None and checkpoint_every and state.round % checkpoint_every == 0:
            checkpoint_save(state, checkpoint_path, config_hash)

    if checkpoint_path is not None:
        checkpoint_save(state, checkpoint_path, config_hash)
    model = GlobalModel(state.params, state.round, list(state.loss_history))
    return ExperimentResult(model, state.logs, assignment, tiers, records, list(state.rungs), state.stopped)


def run_fedavg(config: SimConfig, fleet: Sequence[ResourceProfile], family: NestedModelFamily,
               train: Dataset, shards: ShardPlan, test: Dataset | None = None,
               prox_mu: float | None = None) -> ExperimentResult:
    """Flat FedAvg (or FedProx when prox_mu > 0) over the rung-2 model, no tiers or adjustment."""
    n = len(fleet)
    train_cfg = config.train if prox_mu is None else TrainConfig(
        config.train.lr0, config.train.schedule, config.train.batch_size, config.train.local_epochs,
        prox_mu, config.train.max_local_epochs)
    arch = family.archs[2]
    n_params = family.param_count(2)
    union = np.sort(np.concatenate([shards.shards[d] for d in range(n)]))
    train_X, train_y = train.features[union], train.labels[union]
    params = init_params(family, config.seed)
    logs, history, stopped = [], [], False
    for t in range(1, config.rounds + 1):
        active = apply_dropout(range(n), config.dropout_p, config.seed, t)
        times = {}
        participants = []
        stragglers = []
        for d in active:
            tm = simulate_times(fleet[d], n_params, len(shards.shards[d]), train_cfg.effective_epochs,
                                config.kappa, config.overhead_s)
            if tm["compute"] + tm["communication"] > config.tau_max:
                stragglers.append(d)
            else:
                times[d] = tm
                participants.append(d)
        fill_synchronization(times, {d: 0 for d in participants})
        updates, device_logs = [], []
        for d in participants:
            idx = shards.shards[d]
            result = local_train(params, arch, train.features[idx], train.labels[idx], train_cfg, params, t,
                                 seed=(config.seed, d, t))
            updates.append(Update(d, 2, np.asarray(result.params, dtype=np.float32), len(idx), result.loss))
            usage = simulate_usage(fleet[d], 2, [config.seed, d, t, 0, 1], config.demand, config.usage_noise_sd)
            device_logs.append(DeviceLog(d, 0, 2, 2, result.loss, result.grad_sq_norm, usage.cpu, usage.memory,
                                         [], BYTES_PER_PARAM * n_params, BYTES_PER_PARAM * n_params,
                                         times[d], result.sample_param_ops))
        if updates:
            params = fedavg(updates)
        loss, acc, auc = _evaluate(family, params, train_X, train_y, test)
        usages = [0.5 * (dl.usage_cpu + dl.usage_memory) for dl in device_logs]
        round_bytes = sum(dl.bytes_up + dl.bytes_down for dl in device_logs)
        objective = objective_scalar(loss, usages, round_bytes, round_bytes, config.objective_weights)
        cluster_losses = {0: float(np.average([u.loss for u in updates], weights=[u.n_samples for u in updates]))} \
            if updates else {}
        logs.append(RoundLog(t, active, stragglers, device_logs, cluster_losses, loss, objective, acc, auc))
        history.append(loss)
        if config.early_stop and check_convergence(history, config.conv_window, config.conv_threshold)[1]:
            stopped = True
            break
    return ExperimentResult(GlobalModel(params, len(logs), history), logs, None, {}, [], [2] * n, stopped)


def write_round_logs(logs: Sequence[RoundLog], path, header: str | None = None) -> None:
    with open(path, "w") as fh:
        if header:
            fh.write(header + "\n")
        for lg in logs:
            fh.write(lg.to_json() + "\n")
