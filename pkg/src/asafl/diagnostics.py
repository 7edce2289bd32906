"""Cost accounting, complexity estimates, convergence fits and quadratic-oracle checks."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
from scipy.optimize import linprog, nnls
from scipy.stats import rankdata

from .models import ModelArch, NestedModelFamily, predict_proba

BYTES_PER_PARAM = 4


# -- communication ----------------------------------------------------------

@dataclass
class CommCost:
    total: int
    per_round: list
    fedavg_total: int
    reduction: float


def comm_cost(logs, family: NestedModelFamily) -> CommCost:
    """Bytes recomputed from the rung history, against rung 2 for the same participants."""
    if not logs:
        raise ValueError("comm_cost needs at least one round log")
    per_round, fedavg_total = [], 0
    for log in logs:
        moved = 0
        for dev in log.devices:
            moved += BYTES_PER_PARAM * (family.param_count(dev.rung_down) + family.param_count(dev.rung_up))
            fedavg_total += 2 * BYTES_PER_PARAM * family.param_count(2)
        per_round.append(moved)
    total = sum(per_round)
    reduction = 1.0 - total / fedavg_total if fedavg_total else 0.0
    return CommCost(total, per_round, fedavg_total, reduction)


# -- complexity -------------------------------------------------------------

@dataclass(frozen=True)
class ComplexityEstimate:
    t_bench: float
    t_clust: float
    t_train: float
    s_device: float
    s_global: float
    comm: float


def complexity_estimates(N: int, K: int, t: int, E: int, m: float, p: float, B: float,
                         s_list: Sequence[float] = ()) -> ComplexityEstimate:
    """Asymptotic cost terms evaluated with unit constants."""
    if min(N, K, t, E, m, p, B) <= 0:
        raise ValueError("complexity inputs must be positive")
    n_log_n = N * math.log(N) if N > 1 else 0.0
    return ComplexityEstimate(
        t_bench=n_log_n + sum(float(s) ** 3 for s in s_list),
        t_clust=float(N * K * t),
        t_train=N * E * m * p + n_log_n,
        s_device=p + math.sqrt(p),
        s_global=N * p + K * math.sqrt(p),
        comm=N * E * p / B,
    )


# -- convergence-rate fits --------------------------------------------------

@dataclass
class ConvergenceFit:
    C_hat: float
    D_hat: float
    residual: float
    relative_residual: float
    converged: bool


def _design(ts) -> np.ndarray:
    ts = np.asarray(ts, dtype=float)
    return np.column_stack([1.0 / ts, 1.0 / np.sqrt(ts)])


def fit_convergence(history: Sequence[float], ts: Sequence[float] | None = None,
                    max_relative_residual: float = 0.05) -> ConvergenceFit:
    """Non-negative least squares of g_T on (1/T, 1/sqrt(T))."""
    g = np.asarray(history, dtype=float)
    if len(g) < 4:
        raise ValueError("need at least 4 points to fit")
    ts = np.arange(1, len(g) + 1) if ts is None else np.asarray(ts, dtype=float)
    coef, residual = nnls(_design(ts), g)
    scale = float(np.linalg.norm(g))
    rel = residual / scale if scale > 0 else 0.0
    return ConvergenceFit(float(coef[0]), float(coef[1]), float(residual), rel, rel <= max_relative_residual)


def fit_envelope(values: Sequence[float], ts: Sequence[float] | None = None, t_min: int = 1):
    """Tightest C/T + D/sqrt(T) lying on or above ``values`` for T >= t_min (an LP)."""
    v = np.asarray(values, dtype=float)
    ts = np.arange(1, len(v) + 1, dtype=float) if ts is None else np.asarray(ts, dtype=float)
    keep = ts >= t_min
    A = _design(ts[keep])
    res = linprog(A.sum(axis=0), A_ub=-A, b_ub=-v[keep], bounds=[(0, None), (0, None)], method="highs")
    if not res.success:
        raise RuntimeError(f"envelope fit failed: {res.message}")
    return float(res.x[0]), float(res.x[1])


def envelope(C: float, D: float, ts) -> np.ndarray:
    return _design(ts) @ np.array([C, D])


# -- quadratic oracle -------------------------------------------------------

@dataclass
class QuadraticTrace:
    """Monte-Carlo SGD on f(w) = mu/2 ||w||^2; rows are seeds, columns steps 1..T+1."""

    V: np.ndarray          # ||w_t - w*||^2
    grad_sq: np.ndarray    # ||grad F(w_t)||^2
    etas: np.ndarray       # step size used at step t
    mu: float
    sigma2: float
    final: np.ndarray = field(default_factory=lambda: np.empty(0))


def simulate_quadratic_sgd(dim: int, mu: float, sigma2: float, etas: Sequence[float], seeds: int,
                           w0=None, seed: int = 0, constant_noise=None) -> QuadraticTrace:
    """Vectorised over seeds. Gradient noise is N(0, sigma2/dim I), so E||xi||^2 = sigma2."""
    etas = np.asarray(etas, dtype=float)
    rng = np.random.default_rng(seed)
    w = np.zeros((seeds, dim)) if w0 is None else np.tile(np.asarray(w0, dtype=float), (seeds, 1))
    V = np.empty((seeds, len(etas) + 1))
    V[:, 0] = np.sum(w * w, axis=1)
    noise_sd = math.sqrt(sigma2 / dim)
    for t, eta in enumerate(etas):
        xi = rng.normal(0.0, noise_sd, size=w.shape) if sigma2 > 0 else 0.0
        w = w - eta * (mu * w + xi)
        V[:, t + 1] = np.sum(w * w, axis=1)
    return QuadraticTrace(V, mu * mu * V, etas, mu, sigma2, final=w)


def inv_t_etas(mu: float, T: int) -> np.ndarray:
    return 1.0 / (mu * np.arange(1, T + 1))


def expected_grad_curve(mu: float, sigma2: float, etas, v0: float) -> np.ndarray:
    """Closed-form E||grad F(w_t)||^2 for the quadratic oracle, t = 1..T+1."""
    m = [v0]
    for eta in etas:
        m.append((1.0 - mu * eta) ** 2 * m[-1] + eta * eta * sigma2)
    return mu * mu * np.array(m)


@dataclass
class LyapunovReport:
    mean_V: np.ndarray
    bound: np.ndarray          # stated recursion bound for step t -> t+1
    margin: np.ndarray         # 3 standard errors of the per-seed residual
    violations: list           # steps t (1-based) where E V_{t+1} exceeds bound + margin
    exact_violations: list     # same check with the exact contraction (1 - mu eta)^2
    suboptimality: float
    final_bound: float

    @property
    def recursion_holds(self) -> bool:
        return not self.violations

    @property
    def final_bound_holds(self) -> bool:
        return self.suboptimality <= self.final_bound


def lyapunov_check(trace: QuadraticTrace, L: float | None = None, n_se: float = 3.0) -> LyapunovReport:
    """Check E V_{t+1} <= (1 - 2 mu eta_t) E V_t + eta_t^2 sigma^2 step by step.

    Also evaluates the final bound (L D^2 log T)/(2T) + sigma^2/(2 sqrt T)
    against the mean suboptimality mu/2 E||w_T - w*||^2.
    """
    V, etas, mu, s2 = trace.V, trace.etas, trace.mu, trace.sigma2
    L = mu if L is None else L
    n = V.shape[0]
    stated = V[:, 1:] - (1 - 2 * mu * etas) * V[:, :-1] - etas ** 2 * s2
    exact = V[:, 1:] - (1 - mu * etas) ** 2 * V[:, :-1] - etas ** 2 * s2
    se = lambda r: r.std(axis=0, ddof=1) / math.sqrt(n) if n > 1 else np.zeros(r.shape[1])
    margin = n_se * se(stated)
    violations = [int(t) + 1 for t in np.flatnonzero(stated.mean(axis=0) > margin)]
    exact_violations = [int(t) + 1 for t in np.flatnonzero(exact.mean(axis=0) > n_se * se(exact))]
    mean_V = V.mean(axis=0)
    bound = (1 - 2 * mu * etas) * mean_V[:-1] + etas ** 2 * s2
    T = len(etas)
    D2 = float(mean_V[0])
    final_bound = L * D2 * math.log(T) / (2 * T) + s2 / (2 * math.sqrt(T))
    suboptimality = 0.5 * mu * float(mean_V[-1])
    return LyapunovReport(mean_V, bound, margin, violations, exact_violations, suboptimality, final_bound)


def telescoping_check(mu: float, sigma2: float, eta: float, T: int, seeds: int, w0, dim: int,
                      seed: int = 0, n_se: float = 3.0) -> dict:
    """(1/T) sum E||grad F(w_t)||^2 <= 2 (F(w0) - F*) / (eta T) + L eta sigma^2 / 2, with L = mu."""
    trace = simulate_quadratic_sgd(dim, mu, sigma2, np.full(T, eta), seeds, w0, seed)
    per_seed = trace.grad_sq[:, :T].mean(axis=1)
    measured = float(per_seed.mean())
    se = float(per_seed.std(ddof=1) / math.sqrt(seeds))
    f0 = 0.5 * mu * float(np.sum(np.asarray(w0, dtype=float) ** 2))
    bound = 2 * f0 / (eta * T) + mu * eta * sigma2 / 2
    return {"measured": measured, "se": se, "bound": bound, "holds": measured <= bound + n_se * se}


@dataclass
class StabilityReport:
    epsilon: float
    delta: float
    T0: int
    empirical_prob: float

    @property
    def satisfied(self) -> bool:
        return self.empirical_prob >= 1 - self.delta


def stability_report(trace: QuadraticTrace, epsilon: float, delta: float, T0: int) -> StabilityReport:
    """Fraction of seeds whose ||w_t - w*|| stays within epsilon for all t >= T0."""
    inside = np.sqrt(trace.V[:, T0:]) <= epsilon
    return StabilityReport(epsilon, delta, T0, float(np.mean(inside.all(axis=1))))


# -- heterogeneity and efficiency -------------------------------------------

def variance_estimate(device_gradients, global_gradient=None) -> float:
    """Mean squared deviation of per-device gradients from the reference gradient."""
    G = np.asarray(device_gradients, dtype=float)
    if G.ndim != 2 or len(G) < 2:
        raise ValueError("need gradients from at least two devices")
    ref = G.mean(axis=0) if global_gradient is None else np.asarray(global_gradient, dtype=float)
    return float(np.mean(np.sum((G - ref) ** 2, axis=1)))


@dataclass
class EfficiencyReport:
    resource_efficiency: float
    comm_efficiency: float
    score_bound: float

    @property
    def bound_met(self) -> bool:
        return self.resource_efficiency >= self.score_bound


def efficiency_metrics(logs, bandwidth_bytes: Sequence[float], scores: Sequence[float]) -> EfficiencyReport:
    """Mean utilisation, achieved vs configured transfer rate, and the 1 - exp(-mean score) bound.

    Achieved rate counts synchronisation waits, so C_eff = comm / (comm + sync).
    """
    usage, ratios = [], []
    for log in logs:
        for dev in log.devices:
            usage.append(0.5 * (dev.usage_cpu + dev.usage_memory))
            moved = dev.bytes_up + dev.bytes_down
            busy = dev.times["communication"] + dev.times["synchronization"]
            if busy > 0:
                ratios.append(moved / busy / bandwidth_bytes[dev.device_id])
    if not usage:
        raise ValueError("no participating devices in logs")
    bound = 1.0 - math.exp(-float(np.mean(scores)))
    return EfficiencyReport(float(np.mean(usage)), float(np.mean(ratios)) if ratios else 0.0, bound)


def score_bound(scores) -> float:
    return 1.0 - math.exp(-float(np.mean(scores)))


# -- evaluation -------------------------------------------------------------

def classification_metrics(proba: np.ndarray, labels, classes: int) -> dict:
    proba = np.asarray(proba, dtype=float)
    labels = np.asarray(labels, dtype=int)
    if len(labels) == 0:
        raise ValueError("empty evaluation set")
    pred = np.argmax(proba, axis=1)
    f1, aucs = [], []
    for c in range(classes):
        tp = int(np.sum((pred == c) & (labels == c)))
        fp = int(np.sum((pred == c) & (labels != c)))
        fn = int(np.sum((pred != c) & (labels == c)))
        f1.append(2 * tp / (2 * tp + fp + fn) if tp + fp + fn else 0.0)
        pos = labels == c
        n_pos, n_neg = int(pos.sum()), int((~pos).sum())
        if n_pos and n_neg:
            ranks = rankdata(proba[:, c])
            aucs.append((ranks[pos].sum() - n_pos * (n_pos + 1) / 2) / (n_pos * n_neg))
    return {"accuracy": float(np.mean(pred == labels)), "f1": f1,
            "auc": float(np.mean(aucs)) if aucs else float("nan")}


def eval_metrics(params, arch: ModelArch, X, y, classes: int) -> dict:
    return classification_metrics(predict_proba(arch, params, X), y, classes)


# -- descriptive bound reports ----------------------------------------------

def accuracy_bound_check(local_accs, global_acc: float, score_variance, constant: float = 1.0) -> list[bool]:
    """Per device: Acc_i >= Acc_global - constant * sqrt(Var S_i)."""
    local_accs = np.asarray(local_accs, dtype=float)
    score_variance = np.asarray(score_variance, dtype=float)
    if local_accs.shape != score_variance.shape:
        raise ValueError("local accuracies and score variances must match")
    slack = constant * np.sqrt(score_variance)
    return [bool(a >= global_acc - s) for a, s in zip(local_accs, slack)]


def model_convergence_check(param_history, delta: float, epsilon: float) -> dict:
    """First step t with ||w_t - w_{t-1}|| > delta ||w_{t-1} - w_{t-2}|| + epsilon."""
    W = np.asarray(param_history, dtype=float)
    if len(W) < 3:
        raise ValueError("need at least three parameter snapshots")
    steps = np.linalg.norm(np.diff(W, axis=0), axis=1)
    first = None
    for t in range(1, len(steps)):
        if steps[t] > delta * steps[t - 1] + epsilon:
            first = t + 1
            break
    return {"steps": steps.tolist(), "first_violation": first, "satisfied": first is None}
