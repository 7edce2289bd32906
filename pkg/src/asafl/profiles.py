"""Synthetic device fleets, simulated benchmarks and capability scoring."""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
from scipy.stats import truncnorm

# Simulated hardware constants. Every benchmark time is a closed-form function
# of these and the profile, so the cost model can be evaluated by hand.
FLOPS_PER_CYCLE = 8.0
GPU_MULTIPLIER = 10.0
MATMUL_FLOP_FACTOR = 2.0  # a dim x dim matmul costs 2 * dim**3 flops
MEM_BYTES_PER_SEC_PER_GB = 2.0e9

FEATURE_NAMES = (
    "cores", "ghz", "gpu", "ram", "storage", "bw", "lat", "rel",
    "matmul_time", "memory_pass_time", "roundtrip_time",
)
PROFILE_FEATURES = FEATURE_NAMES[:8]
FEATURE_GROUPS = {
    "compute": ("cores", "ghz", "gpu", "matmul_time"),
    "memory": ("ram", "storage", "memory_pass_time"),
    "network": ("bw", "lat", "rel", "roundtrip_time"),
}
LOWER_IS_BETTER = frozenset({"lat", "matmul_time", "memory_pass_time", "roundtrip_time"})
CSV_COLUMNS = ("id", "cores", "ghz", "gpu", "ram", "storage", "bw", "lat", "rel")

TIER_NAMES = ("high", "mid", "low")


@dataclass(frozen=True)
class ResourceProfile:
    """Compute, memory and network capability of one device.

    Units: cores (count), ghz, gpu (0/1), ram and storage (GB),
    bw (Mbit/s), lat (ms), rel (delivery fraction in [0, 1]).
    """

    cores: float
    ghz: float
    gpu: int
    ram: float
    storage: float
    bw: float
    lat: float
    rel: float

    def __post_init__(self):
        values = self.as_array()
        if not np.all(np.isfinite(values)) or np.any(values < 0):
            raise ValueError(f"profile entries must be finite and >= 0: {self}")
        if self.gpu not in (0, 1):
            raise ValueError(f"gpu flag must be 0 or 1, got {self.gpu!r}")
        if not 0.0 <= self.rel <= 1.0:
            raise ValueError(f"reliability must lie in [0, 1], got {self.rel}")

    @property
    def compute(self) -> np.ndarray:
        return np.array([self.cores, self.ghz, self.gpu], dtype=float)

    @property
    def memory(self) -> np.ndarray:
        return np.array([self.ram, self.storage], dtype=float)

    @property
    def network(self) -> np.ndarray:
        return np.array([self.bw, self.lat, self.rel], dtype=float)

    def as_array(self) -> np.ndarray:
        return np.array([getattr(self, name) for name in PROFILE_FEATURES], dtype=float)

    @property
    def effective_flops(self) -> float:
        return self.cores * self.ghz * 1e9 * FLOPS_PER_CYCLE * (GPU_MULTIPLIER if self.gpu else 1.0)

    @property
    def cpu_capacity(self) -> float:
        """Compute capacity in core-GHz (GPU devices scaled by GPU_MULTIPLIER)."""
        return self.cores * self.ghz * (GPU_MULTIPLIER if self.gpu else 1.0)

    @property
    def bandwidth_bytes(self) -> float:
        return self.bw * 1e6 / 8.0


# Mid-tier reference device used in documentation and hand-evaluated tests.
CANONICAL_MID = ResourceProfile(cores=4, ghz=2.0, gpu=0, ram=3.0, storage=64.0,
                                bw=30.0, lat=30.0, rel=0.95)


@dataclass(frozen=True)
class Workload:
    matmul_dim: int = 64
    memory_bytes: int = 64 * 2**20
    probe_bytes: int = 64 * 2**10

    def __post_init__(self):
        if min(self.matmul_dim, self.memory_bytes, self.probe_bytes) < 1:
            raise ValueError("workload dimensions must be >= 1")


@dataclass(frozen=True)
class BenchmarkResult:
    matmul_time: float
    memory_pass_time: float
    roundtrip_time: float


@dataclass(frozen=True)
class ScoringWeights:
    weights: np.ndarray
    names: tuple = FEATURE_NAMES

    def __post_init__(self):
        w = np.asarray(self.weights, dtype=float)
        object.__setattr__(self, "weights", w)
        if w.ndim != 1 or len(w) != len(self.names):
            raise ValueError(f"need one weight per feature ({len(self.names)}), got shape {w.shape}")
        if np.any(w < 0) or abs(w.sum() - 1.0) > 1e-9:
            raise ValueError(f"weights must be non-negative and sum to 1, got sum {w.sum()!r}")

    @classmethod
    def from_groups(cls, compute=0.5, memory=0.3, network=0.2, include_benchmark=True):
        """Split group weights evenly over the features of each group."""
        names = FEATURE_NAMES if include_benchmark else PROFILE_FEATURES
        group_weight = {"compute": compute, "memory": memory, "network": network}
        weights = []
        for name in names:
            group = next(g for g, members in FEATURE_GROUPS.items() if name in members)
            members = [m for m in FEATURE_GROUPS[group] if m in names]
            weights.append(group_weight[group] / len(members))
        return cls(np.array(weights), tuple(names))

    @property
    def lower_is_better(self) -> np.ndarray:
        return np.array([name in LOWER_IS_BETTER for name in self.names])


@dataclass
class DeviceRecord:
    id: int
    profile: ResourceProfile
    benchmark: BenchmarkResult | None = None
    normalized_features: np.ndarray = field(default_factory=lambda: np.empty(0))
    score: float = float("nan")


# Truncated-Gaussian archetypes: (mean, sd, low, high) per profile field.
_ARCHETYPES = {
    "high": dict(cores=(8, 2, 4, 16), ghz=(3.2, 0.3, 2.5, 4.0), gpu=1,
                 ram=(16, 4, 8, 64), storage=(256, 64, 64, 1024),
                 bw=(100, 20, 50, 1000), lat=(10, 3, 2, 30), rel=(0.98, 0.01, 0.9, 1.0)),
    "mid": dict(cores=(4, 1, 2, 8), ghz=(2.0, 0.3, 1.2, 2.8), gpu=0,
                ram=(3, 0.5, 2, 4), storage=(64, 16, 16, 128),
                bw=(30, 8, 10, 60), lat=(30, 8, 10, 60), rel=(0.93, 0.03, 0.8, 1.0)),
    "low": dict(cores=(1.5, 0.5, 1, 2), ghz=(1.0, 0.2, 0.6, 1.4), gpu=0,
                ram=(1.0, 0.3, 0.25, 1.9), storage=(8, 4, 1, 16),
                bw=(5, 2, 1, 10), lat=(80, 20, 40, 200), rel=(0.85, 0.05, 0.6, 0.95)),
}


def tier_quota(n: int, tier_mix: Sequence[float]) -> list[int]:
    """Largest-remainder split of ``n`` devices over the three tiers."""
    mix = np.asarray(tier_mix, dtype=float)
    if n < 1:
        raise ValueError("fleet size must be >= 1")
    if mix.shape != (3,) or np.any(mix < 0) or abs(mix.sum() - 1.0) > 1e-9:
        raise ValueError(f"tier_mix must be three non-negative fractions summing to 1, got {tier_mix}")
    exact = mix * n
    counts = np.floor(exact).astype(int)
    remainder = exact - counts
    # ties on the remainder go to the higher tier
    for idx in sorted(range(3), key=lambda i: (-remainder[i], i))[: n - counts.sum()]:
        counts[idx] += 1
    return counts.tolist()


def _draw(rng, spec) -> float:
    mean, sd, lo, hi = spec
    a, b = (lo - mean) / sd, (hi - mean) / sd
    return float(truncnorm.rvs(a, b, loc=mean, scale=sd, random_state=rng))


def generate_fleet(n: int, tier_mix: Sequence[float] = (0.3, 0.4, 0.3), seed: int = 0,
                   return_tiers: bool = False):
    """Draw ``n`` device profiles from the high/mid/low archetypes.

    Tier counts follow the deterministic quota rule; the order of devices is a
    seeded permutation so tiers are interleaved across ids.
    """
    counts = tier_quota(n, tier_mix)
    rng = np.random.default_rng(seed)
    tiers = np.repeat(np.arange(3), counts)
    tiers = tiers[rng.permutation(n)]
    profiles = []
    for tier in tiers:
        spec = _ARCHETYPES[TIER_NAMES[tier]]
        values = {name: (spec[name] if name == "gpu" else _draw(rng, spec[name]))
                  for name in PROFILE_FEATURES}
        values["cores"] = float(round(values["cores"]))
        profiles.append(ResourceProfile(**values))
    if return_tiers:
        return profiles, [TIER_NAMES[t] for t in tiers]
    return profiles


def run_benchmark(profile: ResourceProfile, workload: Workload = Workload()) -> BenchmarkResult:
    """Closed-form benchmark cost model (cubic matmul, linear memory and probe)."""
    matmul = MATMUL_FLOP_FACTOR * workload.matmul_dim ** 3 / profile.effective_flops
    memory = workload.memory_bytes / (MEM_BYTES_PER_SEC_PER_GB * profile.ram)
    roundtrip = 2.0 * profile.lat / 1000.0 + workload.probe_bytes / profile.bandwidth_bytes
    return BenchmarkResult(matmul, memory, roundtrip)


def raw_features(profile: ResourceProfile, benchmark: BenchmarkResult | None = None) -> np.ndarray:
    values = profile.as_array()
    if benchmark is None:
        return values
    return np.concatenate([values, [benchmark.matmul_time, benchmark.memory_pass_time,
                                    benchmark.roundtrip_time]])


def normalize_features(raw: np.ndarray, lower_is_better: np.ndarray | None = None,
                       bounds: tuple[np.ndarray, np.ndarray] | None = None) -> np.ndarray:
    """Min-max scale each column into [0, 1] over the fleet.

    Lower-is-better columns are inverted so 1 always means "more capable";
    constant columns map to 0.5. ``bounds`` lets a fitted (min, max) pair be
    reused on new rows, which are clipped into [0, 1].
    """
    raw = np.atleast_2d(np.asarray(raw, dtype=float))
    if raw.shape[0] == 0:
        raise ValueError("cannot normalize an empty fleet")
    lo, hi = (raw.min(axis=0), raw.max(axis=0)) if bounds is None else bounds
    span = hi - lo
    constant = span <= 0
    safe = np.where(constant, 1.0, span)
    scaled = (raw - lo) / safe
    if lower_is_better is not None:
        flip = np.asarray(lower_is_better, dtype=bool)
        scaled[:, flip] = 1.0 - scaled[:, flip]
    scaled[:, constant] = 0.5
    return np.clip(scaled, 0.0, 1.0)


def compute_score(features: np.ndarray, weights: ScoringWeights) -> float:
    features = np.asarray(features, dtype=float)
    if features.shape != weights.weights.shape:
        raise ValueError(f"feature length {features.shape} does not match weights {weights.weights.shape}")
    return float(features @ weights.weights)


def profile_fleet(profiles: Sequence[ResourceProfile], weights: ScoringWeights | None = None,
                  workload: Workload = Workload()) -> list[DeviceRecord]:
    """Benchmark, normalize and score a fleet; records come back in id order."""
    weights = weights or ScoringWeights.from_groups()
    with_bench = len(weights.names) == len(FEATURE_NAMES)
    records = [DeviceRecord(i, p, run_benchmark(p, workload)) for i, p in enumerate(profiles)]
    raw = np.array([raw_features(r.profile, r.benchmark if with_bench else None) for r in records])
    normalized = normalize_features(raw, weights.lower_is_better)
    for record, row in zip(records, normalized):
        record.normalized_features = row
        record.score = compute_score(row, weights)
    return records


def write_fleet_csv(profiles: Sequence[ResourceProfile], path) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(CSV_COLUMNS)
        for i, p in enumerate(profiles):
            writer.writerow([i] + [repr(float(getattr(p, c))) if c != "gpu" else p.gpu
                                   for c in CSV_COLUMNS[1:]])


def read_fleet_csv(path) -> list[ResourceProfile]:
    with open(Path(path), newline="") as fh:
        rows = [line for line in fh if not line.startswith("#")]
    reader = csv.DictReader(rows)
    if tuple(reader.fieldnames or ()) != CSV_COLUMNS:
        raise ValueError(f"fleet CSV must have columns {','.join(CSV_COLUMNS)}")
    rows = sorted(reader, key=lambda row: int(row["id"]))
    if [int(r["id"]) for r in rows] != list(range(len(rows))):
        raise ValueError("fleet CSV ids must be dense from 0")
    return [ResourceProfile(**{c: (int(r[c]) if c == "gpu" else float(r[c])) for c in CSV_COLUMNS[1:]})
            for r in rows]


def weight_grid(step: float = 0.1):
    """Every (compute, memory, network) group weighting on a simplex grid."""
    n = int(round(1.0 / step))
    for i in range(n + 1):
        for j in range(n + 1 - i):
            yield (i / n, j / n, (n - i - j) / n)
