"""Local SGD, simulated resource telemetry and the monitor/adjust state machine."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .models import Direction, ModelArch, loss_and_grad, param_count
from .profiles import ResourceProfile

SCHEDULES = ("constant", "inv_sqrt", "inv_t")


@dataclass(frozen=True)
class TrainConfig:
    lr0: float = 0.01
    schedule: str = "constant"
    batch_size: int = 128
    local_epochs: int = 1
    prox_mu: float = 0.0
    # Epoch-budget reading of the delay constraint: caps local_epochs when set.
    max_local_epochs: int | None = None

    def __post_init__(self):
        if self.lr0 <= 0:
            raise ValueError("lr0 must be > 0")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.schedule not in SCHEDULES:
            raise ValueError(f"schedule must be one of {SCHEDULES}, got {self.schedule!r}")
        if self.local_epochs < 0 or self.prox_mu < 0:
            raise ValueError("local_epochs and prox_mu must be non-negative")

    @property
    def effective_epochs(self) -> int:
        if self.max_local_epochs is None:
            return self.local_epochs
        return min(self.local_epochs, self.max_local_epochs)


@dataclass(frozen=True)
class ResourceThresholds:
    cpu: float = 0.9
    memory: float = 0.9
    network: float = 0.9  # accepted but not consulted by the monitor rule

    def __post_init__(self):
        for name in ("cpu", "memory", "network"):
            value = getattr(self, name)
            if not 0.0 < value <= 1.0:
                raise ValueError(f"threshold {name} must lie in (0, 1], got {value}")


@dataclass(frozen=True)
class MonitorState:
    stable_epochs: int = 0
    last_direction: Direction = Direction.HOLD


@dataclass(frozen=True)
class UsageSample:
    cpu: float
    memory: float

    @property
    def mean(self) -> float:
        return 0.5 * (self.cpu + self.memory)


@dataclass(frozen=True)
class DemandTable:
    """Per-rung resource demand: cpu in core-GHz, memory in GB."""

    cpu: tuple = (1.0, 3.0, 7.6)
    memory: tuple = (0.5, 1.2, 2.85)


@dataclass
class LocalResult:
    params: np.ndarray
    loss: float
    grad_sq_norm: float
    sample_param_ops: int = 0
    losses: list = field(default_factory=list)


def lr_schedule(t: int, config: TrainConfig) -> float:
    if t < 1:
        raise ValueError("round index starts at 1")
    if config.schedule == "inv_sqrt":
        return config.lr0 / math.sqrt(t)
    if config.schedule == "inv_t":
        return config.lr0 / t
    return config.lr0


def _rng(seed, epoch: int) -> np.random.Generator:
    entropy = list(seed) if isinstance(seed, (tuple, list)) else [int(seed)]
    return np.random.default_rng([*entropy, epoch])


def local_train(params: np.ndarray, arch: ModelArch, X, y, config: TrainConfig,
                global_ref: np.ndarray | None = None, round_t: int = 1, seed=0,
                first_epoch: int = 0, epochs: int | None = None) -> LocalResult:
    """Mini-batch SGD on one shard, optionally with a proximal pull to ``global_ref``.

    Shuffling for epoch ``e`` is seeded by ``(seed..., first_epoch + e)`` so a
    run split into single-epoch calls reproduces a multi-epoch call exactly.
    """
    X = np.asarray(X, dtype=float)
    y = np.asarray(y, dtype=int)
    if len(y) == 0:
        raise ValueError("cannot train on an empty shard")
    epochs = config.effective_epochs if epochs is None else epochs
    w = np.asarray(params, dtype=np.float64).copy()
    anchor = None if global_ref is None else np.asarray(global_ref, dtype=np.float64)
    use_prox = config.prox_mu > 0 and anchor is not None
    eta = lr_schedule(round_t, config)
    n_params = param_count(arch)

    if epochs == 0:
        loss, grad = loss_and_grad(arch, w, X, y)
        if use_prox:
            grad = grad + config.prox_mu * (w - anchor)
        return LocalResult(w, loss, float(grad @ grad), 0, [loss])

    grad_sq, batches, ops = 0.0, 0, 0
    epoch_losses = []
    for e in range(epochs):
        order = _rng(seed, first_epoch + e).permutation(len(y))
        weighted = 0.0
        for start in range(0, len(order), config.batch_size):
            batch = order[start:start + config.batch_size]
            loss, grad = loss_and_grad(arch, w, X[batch], y[batch])
            if use_prox:
                grad = grad + config.prox_mu * (w - anchor)
            w -= eta * grad
            weighted += loss * len(batch)
            grad_sq += float(grad @ grad)
            batches += 1
            ops += len(batch) * n_params
        epoch_losses.append(weighted / len(y))
    return LocalResult(w, epoch_losses[-1], grad_sq / batches, ops, epoch_losses)


def prox_objective(arch: ModelArch, params, X, y, global_ref, mu: float) -> float:
    """Data loss plus mu/2 * ||w - global_ref||^2."""
    from .models import forward
    diff = np.asarray(params, dtype=float) - np.asarray(global_ref, dtype=float)
    return forward(arch, params, X, y)[1] + 0.5 * mu * float(diff @ diff)


def simulate_usage(profile: ResourceProfile, rung: int, noise_seed, demand: DemandTable = DemandTable(),
                   noise_sd: float = 0.02) -> UsageSample:
    """Demand/capacity ratio plus Gaussian noise, clipped to [0, 1]."""
    rng = np.random.default_rng(noise_seed)
    noise = rng.normal(0.0, noise_sd, size=2) if noise_sd > 0 else np.zeros(2)
    cpu = demand.cpu[rung] / profile.cpu_capacity if profile.cpu_capacity > 0 else 1.0
    memory = demand.memory[rung] / profile.ram if profile.ram > 0 else 1.0
    return UsageSample(float(np.clip(cpu + noise[0], 0.0, 1.0)),
                       float(np.clip(memory + noise[1], 0.0, 1.0)))


def monitor_and_adjust(usage: UsageSample, thresholds: ResourceThresholds,
                       state: MonitorState) -> tuple[Direction, MonitorState]:
    """Strict breach of cpu or memory -> DOWN; three stable epochs in a row -> UP."""
    if usage.cpu > thresholds.cpu or usage.memory > thresholds.memory:
        return Direction.DOWN, MonitorState(0, Direction.DOWN)
    stable = state.stable_epochs + 1
    if stable >= 3:
        return Direction.UP, MonitorState(0, Direction.UP)
    return Direction.HOLD, MonitorState(stable, Direction.HOLD)


def run_monitor(samples: Sequence[UsageSample], thresholds: ResourceThresholds,
                state: MonitorState = MonitorState()) -> list[Direction]:
    directions = []
    for sample in samples:
        direction, state = monitor_and_adjust(sample, thresholds, state)
        directions.append(direction)
    return directions
