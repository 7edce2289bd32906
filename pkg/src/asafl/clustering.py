"""K-Means tiering, minimum-size repair, constraint validation and greedy allocation."""

from __future__ import annotations

import csv
import enum
import math
from dataclasses import dataclass, field, replace
from typing import Mapping, Sequence

import numpy as np


class Tier(enum.IntEnum):
    HIGH = 0
    MID = 1
    LOW = 2

    @property
    def rung(self) -> int:
        # Low -> Simple, Mid -> Medium, High -> Complex
        return 2 - int(self)


@dataclass
class ClusterAssignment:
    k: int
    labels: np.ndarray
    centroids: np.ndarray
    objective: float
    iterations_used: int
    repairs: list = field(default_factory=list)
    objective_history: list = field(default_factory=list)
    distance_computations: int = 0

    def sizes(self) -> np.ndarray:
        return np.bincount(self.labels, minlength=self.k)


def _as_points(points) -> np.ndarray:
    pts = np.asarray(points, dtype=float)
    if pts.ndim == 1:
        pts = pts[:, None]
    return pts


def within_cluster_ss(points, labels, centroids) -> float:
    pts = _as_points(points)
    diff = pts - np.asarray(centroids)[labels]
    return float(np.sum(diff * diff))


def _kmeans_pp(pts: np.ndarray, k: int, rng: np.random.Generator) -> tuple[np.ndarray, int]:
    n = len(pts)
    centers = [pts[rng.integers(n)]]
    d2 = np.sum((pts - centers[0]) ** 2, axis=1)
    evaluated = n
    for _ in range(1, k):
        total = d2.sum()
        # all remaining mass at zero distance: every point is already a center
        idx = rng.integers(n) if total <= 0 else rng.choice(n, p=d2 / total)
        centers.append(pts[idx])
        d2 = np.minimum(d2, np.sum((pts - pts[idx]) ** 2, axis=1))
        evaluated += n
    return np.array(centers), evaluated


def _assign(pts: np.ndarray, centroids: np.ndarray) -> np.ndarray:
    d2 = np.sum((pts[:, None, :] - centroids[None, :, :]) ** 2, axis=2)
    return np.argmin(d2, axis=1)  # first minimum -> lowest cluster id on ties


def kmeans(points, k: int = 3, seed: int = 0, max_iter: int = 100, tol: float = 1e-6) -> ClusterAssignment:
    """Lloyd's algorithm with k-means++ seeding.

    ``objective_history`` holds the within-cluster sum of squares after every
    assignment step and after the final update; it never increases.
    """
    pts = _as_points(points)
    if k < 1:
        raise ValueError("k must be >= 1")
    if len(pts) < k:
        raise ValueError(f"need at least k={k} points, got {len(pts)}")
    rng = np.random.default_rng(seed)
    centroids, distances = _kmeans_pp(pts, k, rng)
    history = []
    labels = np.zeros(len(pts), dtype=int)
    iterations = 0
    for _ in range(max_iter):
        labels = _assign(pts, centroids)
        distances += len(pts) * k
        iterations += 1
        history.append(within_cluster_ss(pts, labels, centroids))
        updated = centroids.copy()
        for c in range(k):
            members = labels == c
            if members.any():
                updated[c] = pts[members].mean(axis=0)
        shift = float(np.max(np.linalg.norm(updated - centroids, axis=1)))
        centroids = updated
        if shift < tol:
            break
    objective = within_cluster_ss(pts, labels, centroids)
    history.append(objective)
    return ClusterAssignment(k, labels, centroids, objective, iterations,
                             objective_history=history, distance_computations=distances)


def _recompute_centroids(pts, labels, old):
    centroids = old.copy()
    for c in range(len(old)):
        members = labels == c
        if members.any():
            centroids[c] = pts[members].mean(axis=0)
    return centroids


def repair_min_size(assignment: ClusterAssignment, points, n_min: int) -> ClusterAssignment:
    """Move devices into undersized clusters until each has ``n_min`` members.

    The receiver is the smallest cluster, the donor the largest; the donor
    member closest to the receiver's centroid moves. Ties go to the lowest id.
    """
    pts = _as_points(points)
    k = assignment.k
    if k * n_min > len(pts):
        raise ValueError(f"infeasible: {k} clusters x n_min={n_min} exceeds {len(pts)} devices")
    labels = assignment.labels.copy()
    repairs = list(assignment.repairs)
    targets = assignment.centroids
    while True:
        sizes = np.bincount(labels, minlength=k)
        if sizes.min() >= n_min:
            break
        receiver = int(np.argmin(sizes))
        donor = int(np.argmax(sizes))
        members = np.flatnonzero(labels == donor)
        d2 = np.sum((pts[members] - targets[receiver]) ** 2, axis=1)
        moved = int(members[np.argmin(d2)])
        labels[moved] = receiver
        repairs.append((moved, donor, receiver))
    if len(repairs) == len(assignment.repairs):
        return assignment
    centroids = _recompute_centroids(pts, labels, assignment.centroids)
    return replace(assignment, labels=labels, centroids=centroids,
                   objective=within_cluster_ss(pts, labels, centroids), repairs=repairs)


def map_tiers(assignment: ClusterAssignment, scores) -> dict[int, Tier]:
    """Rank clusters by mean member score: highest is HIGH, lowest is LOW."""
    if assignment.k != 3:
        raise ValueError(f"tier mapping needs k=3, got k={assignment.k}")
    scores = np.asarray([scores[i] for i in range(len(assignment.labels))], dtype=float)
    means = []
    for c in range(3):
        members = assignment.labels == c
        means.append(scores[members].mean() if members.any() else -math.inf)
    order = sorted(range(3), key=lambda c: (-means[c], c))
    return {c: Tier(rank) for rank, c in enumerate(order)}


def cluster_devices(points, scores, k=3, n_min=2, seed=0, max_iter=100, tol=1e-6):
    """kmeans + repair + tier mapping (tier map is empty unless k == 3)."""
    assignment = repair_min_size(kmeans(points, k, seed, max_iter, tol), points, n_min)
    tiers = map_tiers(assignment, scores) if k == 3 else {}
    return assignment, tiers


def write_assignment_csv(path, assignment: ClusterAssignment, tiers: Mapping[int, Tier], scores,
                         header: str | None = None) -> None:
    with open(path, "w", newline="") as fh:
        if header:
            fh.write(header + "\n")
        writer = csv.writer(fh)
        writer.writerow(["device_id", "cluster_id", "tier", "score"])
        for device, cluster in enumerate(assignment.labels):
            tier = tiers[int(cluster)].name if tiers else ""
            writer.writerow([device, int(cluster), tier, repr(float(scores[device]))])


# -- constraints ------------------------------------------------------------

@dataclass
class ConstraintReport:
    c1_violations: list = field(default_factory=list)
    c2_violations: list = field(default_factory=list)
    c3_violations: list = field(default_factory=list)
    c4_violations: list = field(default_factory=list)

    @property
    def feasible(self) -> bool:
        return not (self.c1_violations or self.c2_violations
                    or self.c3_violations or self.c4_violations)


@dataclass(frozen=True)
class ConstraintParams:
    n_min: int = 2
    tau_max: float = math.inf
    sigma2_max: float = math.inf


def device_loads(x, u, demands) -> np.ndarray:
    x = np.asarray(x, dtype=float)
    u = np.asarray(u, dtype=float)
    demands = np.asarray(demands, dtype=float)
    return np.array([math.fsum(demands * u[i] * x[i]) for i in range(x.shape[0])])


def check_constraints(x, u, demands, caps, labels, delays, params: ConstraintParams,
                      k: int | None = None) -> ConstraintReport:
    """Evaluate capacity, cluster size, delay and load-variance constraints.

    ``x`` (binary) and ``u`` (utilization in [0, 1]) are devices x tasks.
    """
    x = np.asarray(x)
    u = np.asarray(u, dtype=float)
    labels = np.asarray(labels, dtype=int)
    n_dev = len(caps)
    if x.ndim != 2 or x.shape != u.shape or x.shape[0] != n_dev or x.shape[1] != len(demands):
        raise ValueError(f"allocation shapes inconsistent: x{x.shape} u{u.shape} "
                         f"{n_dev} devices {len(demands)} tasks")
    if len(labels) != n_dev or len(delays) != n_dev:
        raise ValueError("labels and delays need one entry per device")
    if not np.isin(x, (0, 1)).all():
        raise ValueError("x must be binary")
    if np.any(u < 0) or np.any(u > 1):
        raise ValueError("u must lie in [0, 1]")
    k = int(labels.max()) + 1 if k is None else k

    report = ConstraintReport()
    loads = device_loads(x, u, demands)
    for i in range(n_dev):
        if loads[i] > caps[i]:
            report.c1_violations.append((i, float(loads[i]), float(caps[i])))
        if delays[i] > params.tau_max:
            report.c3_violations.append((i, float(delays[i]), params.tau_max))
    for c in range(k):
        members = np.flatnonzero(labels == c)
        if len(members) < params.n_min:
            report.c2_violations.append((c, len(members), params.n_min))
        if len(members):
            member_loads = loads[members]
            mean = math.fsum(member_loads) / len(members)
            var = math.fsum((member_loads - mean) ** 2) / len(members)
            if var > params.sigma2_max:
                report.c4_violations.append((c, var, params.sigma2_max))
    return report


# -- greedy allocation ------------------------------------------------------

@dataclass
class Allocation:
    x: np.ndarray
    u: np.ndarray
    unassigned: list

    def assigned_device(self, task: int) -> int:
        hits = np.flatnonzero(self.x[:, task])
        return int(hits[0]) if len(hits) else -1


def greedy_allocate(demands: Sequence[float], caps: Sequence[float], scores: Sequence[float]) -> Allocation:
    """Largest task first, onto the feasible device with the highest residual x score."""
    demands = np.asarray(demands, dtype=float)
    residual = np.asarray(caps, dtype=float).copy()
    scores = np.asarray(scores, dtype=float)
    if np.any(demands <= 0) or np.any(residual <= 0):
        raise ValueError("demands and capacities must be positive")
    x = np.zeros((len(residual), len(demands)), dtype=int)
    unassigned = []
    for task in sorted(range(len(demands)), key=lambda j: (-demands[j], j)):
        feasible = np.flatnonzero(residual >= demands[task])
        if not len(feasible):
            unassigned.append(task)
            continue
        device = int(feasible[np.argmax(residual[feasible] * scores[feasible])])
        x[device, task] = 1
        residual[device] -= demands[task]
    return Allocation(x, x.astype(float), sorted(unassigned))


def allocation_utility(allocation: Allocation, demands) -> float:
    """Served demand: total nominal requirement of the tasks that were placed."""
    return float(np.sum(np.asarray(demands) * allocation.x.sum(axis=0)))
