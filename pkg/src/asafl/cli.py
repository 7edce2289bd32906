"""Command-line runner: bench, train, compare and diagnose."""

from __future__ import annotations

import argparse
import csv
import json
import logging
import os
import sys
from pathlib import Path

import numpy as np

from . import config as cfgmod
from .clustering import cluster_devices, write_assignment_csv
from .config import ConfigError, ExperimentConfig
from .diagnostics import (comm_cost, efficiency_metrics, expected_grad_curve, envelope, fit_convergence,
                          fit_envelope, inv_t_etas, lyapunov_check, simulate_quadratic_sgd,
                          stability_report, telescoping_check)
from .models import ParamVector, serialize_params
from .profiles import ScoringWeights, profile_fleet, weight_grid, write_fleet_csv
from .simulator import (RoundFailure, RoundLog, checkpoint_restore, run_experiment, run_fedavg,
                        write_round_logs)

log = logging.getLogger("asafl")

EXIT_OK, EXIT_CONFIG, EXIT_RUNTIME = 0, 2, 3
METHODS = ("asa", "fedavg", "fedprox", "hierfl")


def _write_csv(path: Path, header: str, columns, rows) -> None:
    with open(path, "w", newline="") as fh:
        fh.write(header + "\n")
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(columns)
        writer.writerows(rows)


def _fmt(x) -> str:
    return repr(float(x))


# -- bench ------------------------------------------------------------------

def cmd_bench(cfg: ExperimentConfig, out: Path, sweep: bool = False) -> None:
    fleet = cfgmod.build_fleet(cfg)
    weights = cfgmod.scoring_weights(cfg)
    records = profile_fleet(fleet, weights, cfgmod.workload(cfg))
    fleet_path = out / "fleet.csv"
    write_fleet_csv(fleet, fleet_path)
    fleet_path.write_text(cfg.header + "\n" + fleet_path.read_text())

    names = weights.names
    rows = [[r.id, r.benchmark.matmul_time, r.benchmark.memory_pass_time, r.benchmark.roundtrip_time]
            + [_fmt(v) for v in r.normalized_features] + [_fmt(r.score)] for r in records]
    _write_csv(out / "scores.csv", cfg.header,
               ["device_id", "matmul_time", "memory_pass_time", "roundtrip_time"]
               + [f"norm_{n}" for n in names] + ["score"], rows)

    scores = [r.score for r in records]
    points = _cluster_points(cfg, records)
    c = cfg.clustering
    assignment, tiers = cluster_devices(points, scores, c.k, min(c.n_min, len(records) // c.k),
                                        cfg.simulation.seed, c.max_iter)
    write_assignment_csv(out / "assignment.csv", assignment, tiers, scores, header=cfg.header)

    if sweep:
        step = cfg.diagnostics.sweep_step or 0.1
        sweep_rows = []
        for cw, mw, nw in weight_grid(step):
            w = ScoringWeights.from_groups(cw, mw, nw, cfg.weights.include_benchmark)
            recs = profile_fleet(fleet, w, cfgmod.workload(cfg))
            sc = [r.score for r in recs]
            a, _ = cluster_devices(_cluster_points(cfg, recs), sc, c.k, min(c.n_min, len(recs) // c.k),
                                   cfg.simulation.seed, c.max_iter)
            sweep_rows.append([cw, mw, nw, _fmt(a.objective)] + [int(s) for s in a.sizes()])
        _write_csv(out / "weight_sweep.csv", cfg.header,
                   ["compute", "memory", "network", "wcss"] + [f"size_{i}" for i in range(c.k)], sweep_rows)


def _cluster_points(cfg, records):
    if cfg.clustering.cluster_on == "score":
        return np.array([[r.score] for r in records])
    return np.array([r.normalized_features for r in records])


# -- train ------------------------------------------------------------------

def _setup(cfg: ExperimentConfig):
    fleet = cfgmod.build_fleet(cfg)
    train, test = cfgmod.load_datasets(cfg)
    shards = cfgmod.build_shards(cfg, train, len(fleet))
    family = cfgmod.build_model_family(cfg, train.features.shape[1], train.classes)
    return fleet, train, test, shards, family


def _write_model(path: Path, cfg: ExperimentConfig, params) -> None:
    path.write_bytes((cfg.header + "\n").encode() + serialize_params(ParamVector(params, 2)))


def cmd_train(cfg: ExperimentConfig, out: Path, resume: Path | None = None) -> dict:
    fleet, train, test, shards, family = _setup(cfg)
    state = checkpoint_restore(resume, cfg.hash) if resume else None
    checkpoint = out / "checkpoint.bin"
    result = run_experiment(cfgmod.sim_config(cfg), fleet, family, train, shards, test,
                            cfgmod.scoring_weights(cfg), cfgmod.workload(cfg), cfg.hash,
                            checkpoint_path=checkpoint, checkpoint_every=cfg.simulation.checkpoint_every,
                            resume=state)
    write_round_logs(result.logs, out / "rounds.ndjson", cfg.header)
    _write_model(out / "model.bin", cfg, result.model.params)
    summary = _summary_row("asa", result, family, cfg.output.target_accuracy)
    _write_csv(out / "summary.csv", cfg.header, SUMMARY_COLUMNS, [summary])
    return dict(zip(SUMMARY_COLUMNS, summary))


# -- compare ----------------------------------------------------------------

SUMMARY_COLUMNS = ["method", "rounds", "final_loss", "final_accuracy", "final_auc", "total_bytes",
                   "comm_reduction", "compute_s", "communication_s", "synchronization_s", "overhead_s",
                   "rounds_to_target"]


def _summary_row(method, result, family, target) -> list:
    logs = result.logs
    if not logs:
        return [method, 0, "nan", "nan", "nan", 0, "nan", 0.0, 0.0, 0.0, 0.0, ""]
    cost = comm_cost(logs, family)
    comps = {k: 0.0 for k in ("compute", "communication", "synchronization", "overhead")}
    for lg in logs:
        for dev in lg.devices:
            for k in comps:
                comps[k] += dev.times[k]
    hit = next((lg.round for lg in logs if lg.accuracy >= target), "")
    last = logs[-1]
    return [method, len(logs), _fmt(last.global_loss), _fmt(last.accuracy), _fmt(last.auc), cost.total,
            _fmt(cost.reduction)] + [_fmt(comps[k]) for k in comps] + [hit]


def run_method(method: str, cfg: ExperimentConfig, fleet, family, train, shards, test):
    sim = cfgmod.sim_config(cfg)
    if method == "asa":
        return run_experiment(sim, fleet, family, train, shards, test, cfgmod.scoring_weights(cfg),
                              cfgmod.workload(cfg), cfg.hash)
    if method == "hierfl":
        uniform = cfgmod.sim_config(cfg, force_rung=2, adaptive=False)
        return run_experiment(uniform, fleet, family, train, shards, test, cfgmod.scoring_weights(cfg),
                              cfgmod.workload(cfg), cfg.hash)
    if method == "fedavg":
        return run_fedavg(sim, fleet, family, train, shards, test)
    if method == "fedprox":
        return run_fedavg(sim, fleet, family, train, shards, test, prox_mu=cfg.training.prox_mu or 0.01)
    raise ConfigError(f"unknown method {method!r}; choose from {', '.join(METHODS)}")


def cmd_compare(cfg: ExperimentConfig, out: Path, methods) -> list:
    if not methods:
        raise ConfigError("--methods needs at least one method")
    for m in methods:
        if m not in METHODS:
            raise ConfigError(f"unknown method {m!r}; choose from {', '.join(METHODS)}")
    fleet, train, test, shards, family = _setup(cfg)
    rows = []
    for method in methods:
        log.info("running %s", method)
        result = run_method(method, cfg, fleet, family, train, shards, test)
        write_round_logs(result.logs, out / f"rounds_{method}.ndjson", cfg.header)
        rows.append(_summary_row(method, result, family, cfg.output.target_accuracy))
    _write_csv(out / "summary.csv", cfg.header, SUMMARY_COLUMNS, rows)
    return rows


# -- diagnose ---------------------------------------------------------------

def read_round_logs(path) -> list:
    with open(path) as fh:
        return [RoundLog.from_dict(json.loads(line)) for line in fh if line.strip() and not line.startswith("#")]


def cmd_diagnose(cfg: ExperimentConfig, out: Path, round_log: Path | None = None) -> dict:
    oracle = cfg.diagnostics.oracle
    if oracle is None:
        raise ConfigError("missing required key 'diagnostics.oracle' (dim, mu, sigma2, T, seeds)")
    dim, mu, s2 = int(oracle["dim"]), float(oracle["mu"]), float(oracle["sigma2"])
    T, seeds = int(oracle["T"]), int(oracle["seeds"])
    w0 = np.full(dim, float(oracle.get("w0_norm", 1.0)) / np.sqrt(dim))
    seed = cfg.simulation.seed

    trace = simulate_quadratic_sgd(dim, mu, s2, inv_t_etas(mu, T), seeds, w0, seed)
    lyap = lyapunov_check(trace)
    rows = []
    for t in range(T):
        mean_next = lyap.mean_V[t + 1]
        rows.append([t + 1, _fmt(lyap.mean_V[t]), _fmt(mean_next), _fmt(lyap.bound[t]), _fmt(lyap.margin[t]),
                     int((t + 1) not in lyap.violations), int((t + 1) not in lyap.exact_violations)])
    _write_csv(out / "lyapunov.csv", cfg.header,
               ["t", "mean_V_t", "mean_V_next", "bound", "margin_3se", "stated_holds", "exact_holds"], rows)

    eta0 = float(oracle.get("eta0", 0.5))
    etas = eta0 / np.sqrt(np.arange(1, T + 1))
    g_trace = simulate_quadratic_sgd(dim, mu, s2, etas, min(seeds, 200), w0, seed + 1)
    measured = g_trace.grad_sq[:, :T].mean(axis=0)
    expected = expected_grad_curve(mu, s2, etas, float(w0 @ w0))[:T]
    t_min = cfg.diagnostics.envelope_t_min
    C, D = fit_envelope(expected, t_min=t_min)
    ts = np.arange(1, T + 1)
    fit = fit_convergence(measured)
    _write_csv(out / "convergence.csv", cfg.header, ["T", "measured_grad_sq", "expected_grad_sq", "envelope"],
               [[t, _fmt(m), _fmt(e), _fmt(v)] for t, m, e, v in zip(ts, measured, expected, envelope(C, D, ts))])

    st = cfg.diagnostics.stability
    stab = stability_report(trace, float(st["epsilon"]), float(st["delta"]), int(st["T0"]))
    tele = telescoping_check(mu, s2, 0.1, T, min(seeds, 200), w0, dim, seed + 2)
    report = {
        "lyapunov": {"violations": len(lyap.violations), "first_violations": lyap.violations[:10],
                     "exact_violations": len(lyap.exact_violations),
                     "suboptimality": lyap.suboptimality, "final_bound": lyap.final_bound,
                     "final_bound_holds": lyap.final_bound_holds},
        "convergence_fit": {"C_hat": fit.C_hat, "D_hat": fit.D_hat, "residual": fit.residual,
                            "converged": fit.converged, "envelope_C": C, "envelope_D": D, "t_min": t_min},
        "stability": {"epsilon": stab.epsilon, "delta": stab.delta, "T0": stab.T0,
                      "empirical_prob": stab.empirical_prob, "satisfied": stab.satisfied},
        "telescoping": tele,
    }
    if round_log is not None:
        logs = read_round_logs(round_log)
        fleet, *_ = _setup(cfg)
        records = profile_fleet(fleet, cfgmod.scoring_weights(cfg), cfgmod.workload(cfg))
        eff = efficiency_metrics(logs, [p.bandwidth_bytes for p in fleet], [r.score for r in records])
        grad = [float(np.mean([d.grad_sq for d in lg.devices])) for lg in logs if lg.devices]
        report["run"] = {"rounds": len(logs), "resource_efficiency": eff.resource_efficiency,
                         "comm_efficiency": eff.comm_efficiency, "score_bound": eff.score_bound,
                         "score_bound_met": eff.bound_met}
        if len(grad) >= 4:
            f = fit_convergence(grad)
            report["run"]["grad_fit"] = {"C_hat": f.C_hat, "D_hat": f.D_hat, "residual": f.residual}
    (out / "diagnostics.json").write_text(
        json.dumps({"header": cfg.header, **report}, indent=2, sort_keys=True, default=float) + "\n")
    return report


# -- entry point ------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="asafl", description="Device-aware federated learning simulator")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--config", required=True, type=Path, help="experiment YAML file")
        p.add_argument("--out", required=True, type=Path, help="output directory")
        p.add_argument("--seed", type=int, help="override simulation.seed")
        p.add_argument("--rounds", type=int, help="override simulation.rounds")
        return p

    common(sub.add_parser("bench", help="profile, score and cluster the fleet")).add_argument(
        "--sweep", action="store_true", help="also sweep group weights on a grid")
    common(sub.add_parser("train", help="run the adaptive training loop")).add_argument(
        "--resume", type=Path, help="checkpoint to continue from")
    common(sub.add_parser("compare", help="run several methods on the same fleet and shards")).add_argument(
        "--methods", default="asa,fedavg,fedprox,hierfl", help="comma-separated subset of " + ",".join(METHODS))
    common(sub.add_parser("diagnose", help="quadratic-oracle convergence reports")).add_argument(
        "--log", type=Path, help="round log to analyse as well")
    return parser


def main(argv=None) -> int:
    logging.basicConfig(level=os.environ.get("ASA_LOG", "WARNING").upper(),
                        format="%(levelname)s %(name)s: %(message)s")
    args = build_parser().parse_args(argv)
    try:
        cfg = cfgmod.load_config(args.config, seed=args.seed, rounds=args.rounds)
        args.out.mkdir(parents=True, exist_ok=True)
        if args.command == "bench":
            cmd_bench(cfg, args.out, args.sweep)
        elif args.command == "train":
            cmd_train(cfg, args.out, args.resume)
        elif args.command == "compare":
            cmd_compare(cfg, args.out, [m.strip() for m in args.methods.split(",") if m.strip()])
        else:
            cmd_diagnose(cfg, args.out, args.log)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (RoundFailure, RuntimeError, ValueError, OSError) as exc:
        print(f"runtime error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
