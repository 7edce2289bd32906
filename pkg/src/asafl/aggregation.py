"""FedAvg, per-cluster aggregation and the cross-rung global merge.

All sums run in ascending contributor order in float64; results are cast to
float32, the wire precision of every uploaded model.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .models import NestedModelFamily, project_params


@dataclass
class Update:
    device_id: int
    rung: int
    params: np.ndarray
    n_samples: int
    loss: float = float("nan")

    def __post_init__(self):
        if self.n_samples < 1:
            raise ValueError(f"update from device {self.device_id} has no samples")


@dataclass
class GlobalModel:
    params: np.ndarray
    round: int = 0
    loss_history: list = field(default_factory=list)


def fedavg(updates: Sequence[Update]) -> np.ndarray:
    """Sample-weighted mean sum(n_i / N * w_i)."""
    if not updates:
        raise ValueError("fedavg needs at least one update")
    rungs = {u.rung for u in updates}
    if len(rungs) != 1:
        raise ValueError(f"fedavg needs a single rung, got {sorted(rungs)}")
    total = sum(u.n_samples for u in updates)
    acc = np.zeros(len(updates[0].params), dtype=np.float64)
    for u in sorted(updates, key=lambda u: u.device_id):
        acc += (u.n_samples / total) * np.asarray(u.params, dtype=np.float64)
    return acc.astype(np.float32)


def intra_cluster_aggregate(updates: Sequence[Update], family: NestedModelFamily, nominal_rung: int,
                            global_params: np.ndarray, cluster_id: int) -> Update | None:
    """Project every member to the cluster's rung, then FedAvg.

    Returns None when the cluster has no contribution this round.
    """
    if not updates:
        return None
    projected = [Update(u.device_id, nominal_rung,
                        project_params(family, u.rung, nominal_rung, u.params, global_params),
                        u.n_samples, u.loss)
                 for u in updates]
    n_total = sum(u.n_samples for u in updates)
    loss = sum(u.n_samples * u.loss for u in updates) / n_total
    return Update(cluster_id, nominal_rung, fedavg(projected), n_total, float(loss))


def hierarchical_merge(cluster_models: Sequence[Update], family: NestedModelFamily,
                       previous: np.ndarray) -> np.ndarray:
    """Per-coordinate weighted mean over the cluster models that cover it.

    Coordinates no contributor covers keep the previous global value.
    """
    previous = np.asarray(previous)
    if not cluster_models:
        return previous.astype(np.float32, copy=True)
    ordered = sorted(cluster_models, key=lambda u: u.device_id)
    denom = np.zeros(len(previous), dtype=np.float64)
    for u in ordered:
        denom[family.coord_maps[u.rung]] += u.n_samples
    acc = np.zeros(len(previous), dtype=np.float64)
    for u in ordered:
        coords = family.coord_maps[u.rung]
        acc[coords] += (u.n_samples / denom[coords]) * np.asarray(u.params, dtype=np.float64)
    merged = np.where(denom > 0, acc, np.asarray(previous, dtype=np.float64))
    return merged.astype(np.float32)


def check_convergence(history: Sequence[float], window: int, threshold: float) -> tuple[float, bool]:
    """Relative change between the two halves of the trailing window."""
    if window < 2:
        raise ValueError("window must be >= 2")
    if len(history) < window:
        return float("inf"), False
    half = window // 2
    recent = float(np.mean(history[-half:]))
    prior = float(np.mean(history[-window:len(history) - half]))
    rate = abs(recent - prior) / max(abs(prior), 1e-12)
    return rate, rate <= threshold
