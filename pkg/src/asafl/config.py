"""Experiment configuration: namespaced YAML sections, validated on load."""

from __future__ import annotations

import copy
import dataclasses
import hashlib
import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import yaml

from .clustering import ConstraintParams
from .data import Dataset, ShardPlan, gen_synthetic, load_idx, partition_label_shards, partition_noniid, \
    train_test_split
from .models import NestedModelFamily, build_family
from .profiles import ResourceProfile, ScoringWeights, Workload, generate_fleet, read_fleet_csv
from .simulator import SimConfig
from .training import DemandTable, ResourceThresholds, TrainConfig

__version__ = "0.1.0"


class ConfigError(ValueError):
    pass


@dataclass
class FleetSection:
    n_devices: int = 10
    tier_mix: list = field(default_factory=lambda: [0.3, 0.4, 0.3])
    csv: str | None = None


@dataclass
class WeightsSection:
    compute: float = 0.5
    memory: float = 0.3
    network: float = 0.2
    include_benchmark: bool = True


@dataclass
class BenchmarkSection:
    matmul_dim: int = 64
    memory_bytes: int = 64 * 2**20
    probe_bytes: int = 64 * 2**10


@dataclass
class ClusteringSection:
    tau_max: float | None
    sigma2_max: float | None
    k: int = 3
    n_min: int = 2
    cluster_on: str = "score"
    max_iter: int = 100


@dataclass
class ModelSection:
    hidden: list = field(default_factory=lambda: [[16], [32], [64]])


@dataclass
class DataSection:
    source: str = "synthetic"
    n: int = 2000
    classes: int = 10
    dim: int = 20
    separation: float = 4.0
    test_fraction: float = 0.25
    train_images: str | None = None
    train_labels: str | None = None
    test_images: str | None = None
    test_labels: str | None = None
    limit: int | None = None
    test_limit: int | None = None
    partition: str = "dirichlet"
    alpha: float = 0.5
    shards_per_client: int = 2


@dataclass
class TrainingSection:
    lr0: float = 0.01
    schedule: str = "constant"
    batch_size: int = 128
    local_epochs: int = 1
    prox_mu: float = 0.0
    max_local_epochs: int | None = None
    thresholds: dict = field(default_factory=lambda: {"cpu": 0.9, "memory": 0.9, "network": 0.9})
    demand: dict = field(default_factory=lambda: {"cpu": [1.0, 3.0, 7.6], "memory": [0.5, 1.2, 2.85]})
    usage_noise_sd: float = 0.02


@dataclass
class SimulationSection:
    rounds: int = 250
    seed: int = 0
    dropout_p: float = 0.0
    objective_weights: list = field(default_factory=lambda: [0.5, 0.25, 0.25])
    recluster_every: int = 10
    conv_window: int = 10
    conv_threshold: float = 1e-4
    early_stop: bool = True
    adaptive: bool = True
    force_rung: int | None = None
    overhead_s: float = 0.05
    kappa: float = 6.0
    checkpoint_every: int = 0


@dataclass
class DiagnosticsSection:
    oracle: dict | None = None
    envelope_t_min: int = 10
    stability: dict = field(default_factory=lambda: {"epsilon": 0.05, "delta": 0.05, "T0": 100})
    accuracy_constant: float = 1.0
    sweep_step: float | None = None


@dataclass
class OutputSection:
    target_accuracy: float = 0.9


SECTIONS = {
    "fleet": FleetSection, "weights": WeightsSection, "benchmark": BenchmarkSection,
    "clustering": ClusteringSection, "model": ModelSection, "data": DataSection,
    "training": TrainingSection, "simulation": SimulationSection,
    "diagnostics": DiagnosticsSection, "output": OutputSection,
}
ORACLE_KEYS = ("dim", "mu", "sigma2", "T", "seeds")


@dataclass
class ExperimentConfig:
    fleet: FleetSection
    weights: WeightsSection
    benchmark: BenchmarkSection
    clustering: ClusteringSection
    model: ModelSection
    data: DataSection
    training: TrainingSection
    simulation: SimulationSection
    diagnostics: DiagnosticsSection
    output: OutputSection
    base_dir: Path = Path(".")

    def to_dict(self) -> dict:
        return {name: dataclasses.asdict(getattr(self, name)) for name in SECTIONS}

    @property
    def hash(self) -> str:
        """sha256 of the canonical config; the round budget is excluded so runs can be extended."""
        raw = self.to_dict()
        raw["simulation"].pop("rounds")
        return hashlib.sha256(json.dumps(raw, sort_keys=True).encode()).hexdigest()

    @property
    def header(self) -> str:
        return f"# asafl {__version__} config {self.hash}"


def _build_section(name: str, cls, raw) -> object:
    if raw is None:
        raw = {}
    if not isinstance(raw, dict):
        raise ConfigError(f"section '{name}' must be a mapping")
    known = {f.name for f in dataclasses.fields(cls)}
    unknown = sorted(set(raw) - known)
    if unknown:
        raise ConfigError(f"unknown key(s) in section '{name}': {', '.join(unknown)}")
    required = [f.name for f in dataclasses.fields(cls)
                if f.default is dataclasses.MISSING and f.default_factory is dataclasses.MISSING]
    missing = [key for key in required if key not in raw]
    if missing:
        raise ConfigError(f"missing required key(s) in section '{name}': {', '.join(missing)}")
    return cls(**copy.deepcopy(raw))


def parse_config(raw: dict, base_dir: Path = Path("."), seed: int | None = None,
                 rounds: int | None = None) -> ExperimentConfig:
    if not isinstance(raw, dict):
        raise ConfigError("configuration must be a mapping of sections")
    unknown = sorted(set(raw) - set(SECTIONS))
    if unknown:
        raise ConfigError(f"unknown section(s): {', '.join(unknown)}")
    if "clustering" not in raw:
        raise ConfigError("missing required section 'clustering' (needs tau_max and sigma2_max)")
    sections = {name: _build_section(name, cls, raw.get(name)) for name, cls in SECTIONS.items()}
    cfg = ExperimentConfig(**sections, base_dir=Path(base_dir))
    if seed is not None:
        cfg.simulation.seed = int(seed)
    if rounds is not None:
        cfg.simulation.rounds = int(rounds)
    validate(cfg)
    return cfg


def load_config(path, seed: int | None = None, rounds: int | None = None) -> ExperimentConfig:
    path = Path(path)
    try:
        raw = yaml.safe_load(path.read_text())
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    except yaml.YAMLError as exc:
        raise ConfigError(f"config {path} is not valid YAML: {exc}") from exc
    return parse_config(raw or {}, path.parent, seed, rounds)


def validate(cfg: ExperimentConfig) -> None:
    """Build every runtime object once so invalid values fail at load time."""
    w = cfg.simulation.objective_weights
    if len(w) != 3 or any(a < 0 for a in w) or not math.isclose(sum(w), 1.0, abs_tol=1e-9):
        raise ConfigError("simulation.objective_weights must form a convex combination "
                          f"(three non-negative weights summing to 1), got {w} with sum {sum(w)!r}")
    gw = (cfg.weights.compute, cfg.weights.memory, cfg.weights.network)
    if any(a < 0 for a in gw) or not math.isclose(sum(gw), 1.0, abs_tol=1e-9):
        raise ConfigError("weights must form a convex combination (non-negative, summing to 1), "
                          f"got compute+memory+network = {sum(gw)!r}")
    if cfg.data.source not in ("synthetic", "idx"):
        raise ConfigError("data.source must be 'synthetic' or 'idx'")
    if cfg.data.partition not in ("dirichlet", "shards"):
        raise ConfigError("data.partition must be 'dirichlet' or 'shards'")
    if cfg.diagnostics.oracle is not None:
        missing = [k for k in ORACLE_KEYS if k not in cfg.diagnostics.oracle]
        if missing:
            raise ConfigError(f"diagnostics.oracle is missing key(s): {', '.join(missing)}")
    try:
        scoring_weights(cfg)
        workload(cfg)
        sim_config(cfg)
        constraint_params(cfg)
    except (TypeError, ValueError) as exc:
        raise ConfigError(str(exc)) from exc


def scoring_weights(cfg: ExperimentConfig) -> ScoringWeights:
    w = cfg.weights
    return ScoringWeights.from_groups(w.compute, w.memory, w.network, w.include_benchmark)


def workload(cfg: ExperimentConfig) -> Workload:
    b = cfg.benchmark
    return Workload(b.matmul_dim, b.memory_bytes, b.probe_bytes)


def train_config(cfg: ExperimentConfig) -> TrainConfig:
    t = cfg.training
    return TrainConfig(t.lr0, t.schedule, t.batch_size, t.local_epochs, t.prox_mu, t.max_local_epochs)


def constraint_params(cfg: ExperimentConfig) -> ConstraintParams:
    c = cfg.clustering
    return ConstraintParams(c.n_min, math.inf if c.tau_max is None else float(c.tau_max),
                            math.inf if c.sigma2_max is None else float(c.sigma2_max))


def sim_config(cfg: ExperimentConfig, **overrides) -> SimConfig:
    s, c, t = cfg.simulation, cfg.clustering, cfg.training
    values = dict(
        rounds=s.rounds, k=c.k, n_min=c.n_min, cluster_on=c.cluster_on, dropout_p=s.dropout_p,
        tau_max=constraint_params(cfg).tau_max, objective_weights=tuple(s.objective_weights),
        seed=s.seed, recluster_every=s.recluster_every, conv_window=s.conv_window,
        conv_threshold=s.conv_threshold, early_stop=s.early_stop, adaptive=s.adaptive,
        force_rung=s.force_rung, overhead_s=s.overhead_s, kappa=s.kappa,
        usage_noise_sd=t.usage_noise_sd, thresholds=ResourceThresholds(**t.thresholds),
        demand=DemandTable(tuple(t.demand["cpu"]), tuple(t.demand["memory"])),
        train=train_config(cfg), kmeans_max_iter=c.max_iter,
    )
    values.update(overrides)
    return SimConfig(**values)


def build_fleet(cfg: ExperimentConfig) -> list[ResourceProfile]:
    if cfg.fleet.csv:
        return read_fleet_csv(cfg.base_dir / cfg.fleet.csv)
    return generate_fleet(cfg.fleet.n_devices, cfg.fleet.tier_mix, cfg.simulation.seed)


def load_datasets(cfg: ExperimentConfig) -> tuple[Dataset, Dataset]:
    d = cfg.data
    if d.source == "idx":
        paths = [d.train_images, d.train_labels, d.test_images, d.test_labels]
        if any(p is None for p in paths):
            raise ConfigError("data.source 'idx' needs train_images, train_labels, test_images, test_labels")
        p = [cfg.base_dir / q for q in paths]
        return (load_idx(p[0], p[1], d.limit, d.classes), load_idx(p[2], p[3], d.test_limit, d.classes))
    full = gen_synthetic(d.n, d.classes, d.dim, d.separation, cfg.simulation.seed)
    return train_test_split(full, d.test_fraction, cfg.simulation.seed)


def build_shards(cfg: ExperimentConfig, train: Dataset, n_clients: int) -> ShardPlan:
    d = cfg.data
    if d.partition == "shards":
        return partition_label_shards(train.labels, n_clients, d.shards_per_client, cfg.simulation.seed)
    return partition_noniid(train.labels, n_clients, d.alpha, cfg.simulation.seed)


def build_model_family(cfg: ExperimentConfig, input_dim: int, classes: int) -> NestedModelFamily:
    return build_family(input_dim, classes, cfg.model.hidden)
