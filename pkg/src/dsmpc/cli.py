"""Command-line interface.

Subcommands compose through the output directory: ``generate`` writes the
network and scenario bank, ``tighten`` the tightening table and error
summary, ``simulate`` the closed-loop logs, ``report`` the violation
statistics plus figures; ``benchmark`` chains all of it for the data-center
cooling study. Later stages reuse artifacts found in --out and rebuild
anything missing from the config.

Exit codes: 0 success, 2 invalid configuration, 3 infeasible problem,
4 solver non-convergence, 1 unexpected failure.
"""

from __future__ import annotations

import argparse
import json
import sys
import time
from pathlib import Path

import numpy as np
import pandas as pd

from .benchmark import build_datacenter_benchmark
from .config import ExperimentConfig
from .disturbance import ScenarioBank, generate_bank
from .errors import ConfigError, InfeasibleProblem, NotConverged
from .errorsim import (
    TubeController,
    error_summary_rows,
    propagate_error_covariance,
    simulate_error_bank,
)
from .harness import (
    TrajectoryLog,
    monte_carlo_runs,
    nominal_input_violations,
    violation_report,
)
from .mpc import DistributedStochasticMpc
from .network import load_network
from .plots import (
    plot_network_trajectories,
    plot_subsystem_detail,
    plot_violation_frequencies,
)
from .tightening import TighteningTable, analytic_table, tighten_all

EXIT_CONFIG = 2
EXIT_INFEASIBLE = 3
EXIT_NOT_CONVERGED = 4


def derived_seed(seed, tag) -> int:
    """Independent integer substream seed for a named pipeline stage."""
    return int(np.random.SeedSequence(entropy=[int(seed), int(tag)]).generate_state(1)[0])


def _outdir(args) -> Path:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _load_model(cfg, out):
    net_path = out / "network.json"
    if net_path.exists():
        return load_network(net_path)
    return cfg.network()


def _load_or_generate_bank(cfg, model, out, seed):
    bank_path = out / "bank.csv"
    if bank_path.exists():
        bank = ScenarioBank.load(bank_path)
        if bank.dim != model.nw_total:
            raise ConfigError(f"stored bank in {bank_path} does not match the network")
        return bank
    task, _ = cfg.horizons()
    opts = cfg.tightening_options()
    spec = cfg.disturbance()
    bank = generate_bank(spec, model, task, opts["num_scenarios"], seed)
    bank.save(bank_path)
    return bank


def _load_or_build_table(cfg, model, constraints, tube, out, seed):
    table_path = out / "tightening.csv"
    if table_path.exists():
        return TighteningTable.load(table_path)
    return _build_table(cfg, model, constraints, tube, out, seed)


def _build_table(cfg, model, constraints, tube, out, seed):
    opts = cfg.tightening_options()
    task, _ = cfg.horizons()
    spec = cfg.disturbance()
    if opts["method"] == "analytic":
        covs = propagate_error_covariance(
            model, tube, spec.covariance_matrix(model.nw_total), spec.rho, task
        )
        table = analytic_table(model, constraints, tube, covs, task)
    else:
        bank = _load_or_generate_bank(cfg, model, out, seed)
        errorbank = simulate_error_bank(model, tube, bank)
        table = tighten_all(model, constraints, errorbank, tube, opts["beta"])
        pd.DataFrame(error_summary_rows(model, constraints, errorbank)).to_csv(
            out / "error_summary.csv", index=False
        )
        if cfg.section("tightening").get("save_error_bank", False):
            errorbank.save(out / "error_bank.csv")
    table.save(out / "tightening.csv")
    return table


def _build_mpc(cfg, model, constraints, tube, table, solver_override=None):
    _, prediction = cfg.horizons()
    solver = cfg.solver_options(solver_override)
    return DistributedStochasticMpc(
        model,
        constraints,
        tube,
        table,
        cfg.cost(model),
        prediction,
        cfg.disturbance(),
        seed=derived_seed(cfg.seed, 0xC0),
        solver=solver["kind"],
        central_tol=solver["tol"],
        admm_params=solver["admm"],
    )


def cmd_generate(args) -> int:
    cfg = ExperimentConfig.load(args.config, args.seed)
    out = _outdir(args)
    model, constraints = cfg.network()
    model.save(out / "network.json", constraints)
    bank = _load_or_generate_bank(cfg, model, out, cfg.seed)
    print(f"network: {model.M} subsystems, {len(constraints)} half-spaces")
    print(f"bank: {bank.count} scenarios over {bank.horizon + 1} steps -> {out / 'bank.csv'}")
    return 0


def cmd_tighten(args) -> int:
    cfg = ExperimentConfig.load(args.config, args.seed)
    out = _outdir(args)
    model, constraints = _load_model(cfg, out)
    tube = cfg.tube(model)
    table = _build_table(cfg, model, constraints, tube, out, cfg.seed)
    print(f"tightening table ({table.method}) over horizon {table.horizon} "
          f"-> {out / 'tightening.csv'}")
    print(f"largest tightening value: {table.max_value():.6f}")
    return 0


def cmd_simulate(args) -> int:
    cfg = ExperimentConfig.load(args.config, args.seed)
    out = _outdir(args)
    model, constraints = _load_model(cfg, out)
    tube = cfg.tube(model)
    table = _load_or_build_table(cfg, model, constraints, tube, out, cfg.seed)
    mpc = _build_mpc(cfg, model, constraints, tube, table, args.solver)
    sim = cfg.simulation_options()
    x0 = cfg.initial_state_vector(model)
    started = time.time()
    logs = monte_carlo_runs(
        mpc,
        x0,
        sim["runs"],
        derived_seed(cfg.seed, 0x51),
        steps=sim["steps"],
        threads=args.threads,
        metadata={"config": str(args.config), "seed": cfg.seed,
                  "solver": mpc.solver},
    )
    for r, log in enumerate(logs):
        log.check_identities()
        log.save(out / f"run_{r:04d}.csv")
    print(f"{len(logs)} closed-loop runs of {logs[0].steps} steps "
          f"in {time.time() - started:.1f}s -> {out}")
    return 0


def _report_artifacts(cfg, out):
    model, constraints = _load_model(cfg, out)
    logs = sorted(out.glob("run_*.csv"))
    if not logs:
        raise ConfigError(f"no run_*.csv logs in {out}; run simulate first")
    return model, constraints, [TrajectoryLog.load(p) for p in logs]


def cmd_report(args) -> int:
    cfg = ExperimentConfig.load(args.config, args.seed)
    out = _outdir(args)
    model, constraints, logs = _report_artifacts(cfg, out)
    sim = cfg.simulation_options()
    report = violation_report(logs, constraints, model, confidence=sim["confidence"])
    report.save(out / "violations.csv", out / "violations_summary.csv")
    table_path = out / "tightening.csv"
    table = TighteningTable.load(table_path) if table_path.exists() else None
    lines = [f"runs: {len(logs)}",
             f"worst state-violation frequency: {report.max_frequency('state'):.4f}",
             f"worst input-violation frequency: {report.max_frequency('input'):.4f}"]
    if table is not None:
        count = nominal_input_violations(logs, constraints, model, table)
        lines.append(f"tightened nominal-input violations: {count}")
    bank_path = out / "bank.csv"
    bank = ScenarioBank.load(bank_path) if bank_path.exists() else None
    highlight = int(cfg.section("simulation").get("highlight", min(9, model.M - 1)))
    plot_network_trajectories(logs[0], model, highlight, out / "fig_trajectories.png")
    if table is not None:
        plot_subsystem_detail(logs[0], model, constraints, table, highlight,
                              bank=bank, path=out / f"fig_subsystem_{highlight}.png")
    plot_violation_frequencies(report, out / "fig_violations.png")
    print("\n".join(lines))
    print(f"violation tables and figures -> {out}")
    return 0


def cmd_benchmark(args) -> int:
    cfg = ExperimentConfig.load(args.config, args.seed)
    out = _outdir(args)
    spec = cfg.benchmark_spec()
    started = time.time()
    artifacts = build_datacenter_benchmark(spec, seed=derived_seed(cfg.seed, 0xBE))
    model, constraints = artifacts.model, artifacts.constraints
    model.save(out / "network.json", constraints)
    bank = generate_bank(artifacts.disturbance, model, spec.task_horizon,
                         spec.num_scenarios, cfg.seed)
    bank.save(out / "bank.csv")
    errorbank = simulate_error_bank(model, artifacts.tube, bank)
    table = tighten_all(model, constraints, errorbank, artifacts.tube, spec.beta)
    table.save(out / "tightening.csv")
    pd.DataFrame(error_summary_rows(model, constraints, errorbank)).to_csv(
        out / "error_summary.csv", index=False
    )
    solver = cfg.solver_options(args.solver)
    mpc = DistributedStochasticMpc(
        model, constraints, artifacts.tube, table, artifacts.cost,
        spec.prediction_horizon, artifacts.disturbance,
        seed=derived_seed(cfg.seed, 0xC0), solver=solver["kind"],
        central_tol=solver["tol"], admm_params=solver["admm"],
    )
    runs = cfg.simulation_options()["runs"]
    logs = monte_carlo_runs(
        mpc, np.zeros(model.nx_total), runs, derived_seed(cfg.seed, 0x51),
        steps=spec.run_steps, threads=args.threads,
        metadata={"benchmark": True, "seed": cfg.seed, "solver": mpc.solver},
    )
    for r, log in enumerate(logs):
        log.check_identities()
        log.save(out / f"run_{r:04d}.csv")
    report = violation_report(logs, constraints, model)
    report.save(out / "violations.csv", out / "violations_summary.csv")
    nominal_bad = nominal_input_violations(logs, constraints, model, table)
    highlight = min(9, model.M - 1)
    plot_network_trajectories(logs[0], model, highlight, out / "fig_trajectories.png")
    plot_subsystem_detail(logs[0], model, constraints, table, highlight,
                          bank=bank, path=out / f"fig_subsystem_{highlight}.png")
    plot_violation_frequencies(report, out / "fig_violations.png")
    summary = {
        "subsystems": model.M,
        "mean_strict_degree": artifacts.mean_strict_degree(),
        "side_length": artifacts.side_length,
        "prediction_horizon": spec.prediction_horizon,
        "run_steps": logs[0].steps,
        "num_scenarios": spec.num_scenarios,
        "runs": runs,
        "worst_state_violation_frequency": report.max_frequency("state"),
        "worst_input_violation_frequency": report.max_frequency("input"),
        "nominal_input_violations": nominal_bad,
        "elapsed_seconds": time.time() - started,
    }
    (out / "benchmark_summary.json").write_text(json.dumps(summary, indent=2))
    for key, value in summary.items():
        print(f"{key}: {value}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="dsmpc",
        description="distributed stochastic MPC with data-driven constraint tightening",
    )
    sub = parser.add_subparsers(dest="command", required=True)
    commands = {
        "generate": (cmd_generate, "write the network file and scenario bank"),
        "tighten": (cmd_tighten, "compute the constraint-tightening table"),
        "simulate": (cmd_simulate, "run closed-loop simulations"),
        "report": (cmd_report, "violation statistics and figures from logs"),
        "benchmark": (cmd_benchmark, "end-to-end data-center cooling study"),
    }
    for name, (func, help_text) in commands.items():
        p = sub.add_parser(name, help=help_text)
        p.add_argument("--config", required=True, help="experiment config (JSON)")
        p.add_argument("--seed", type=int, default=None, help="override the config seed")
        p.add_argument("--out", default="out", help="output directory")
        p.add_argument("--solver", choices=["central", "admm"], default=None,
                       help="override the solver choice")
        p.add_argument("--threads", type=int, default=1,
                       help="parallel worker processes for Monte-Carlo runs")
        p.set_defaults(func=func)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"configuration error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except InfeasibleProblem as exc:
        print(f"infeasible: {exc}", file=sys.stderr)
        for label, amount in (exc.violated_rows or [])[:20]:
            print(f"  violated row {label}: {amount:.3e}", file=sys.stderr)
        return EXIT_INFEASIBLE
    except NotConverged as exc:
        print(f"solver did not converge: {exc}", file=sys.stderr)
        return EXIT_NOT_CONVERGED


if __name__ == "__main__":
    sys.exit(main())
