"""Closed-loop simulation driver and violation statistics.

One run steps the true plant under the combined input u = v + pi: the MPC
supplies the nominal input v, the tube feedback reacts to the measured
error. Logged quantities satisfy x = z + e and u = v + pi entrywise by
construction at every step. Independent Monte-Carlo runs only differ in the
disturbance realization (and are reproducible from the run seed), so they
can execute in parallel worker processes.
"""

from __future__ import annotations

import json
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import pandas as pd

from .disturbance import generate_bank
from .errors import ConfigError, DimensionMismatch
from .errorsim import tube_feedback_batch
from .mpc import DistributedStochasticMpc


@dataclass
class TrajectoryLog:
    """Everything measured along one closed-loop run.

    States cover t = 0..T, input-side signals t = 0..T-1. ``metadata``
    carries seeds and configuration for reproducibility.
    """

    x: np.ndarray
    z: np.ndarray
    e: np.ndarray
    v: np.ndarray
    pi: np.ndarray
    u: np.ndarray
    w: np.ndarray
    objective: np.ndarray
    solver_iterations: np.ndarray
    metadata: dict = field(default_factory=dict)

    @property
    def steps(self) -> int:
        return self.v.shape[0]

    def check_identities(self):
        """The defining log identities, bit-exact: e = x - z and u = v + pi."""
        if not np.array_equal(self.e, self.x - self.z):
            raise AssertionError("log identity x = z + e violated")
        if not np.array_equal(self.u, self.v + self.pi):
            raise AssertionError("log identity u = v + pi violated")

    def save(self, csv_path):
        csv_path = Path(csv_path)
        T = self.steps
        n, m, p = self.x.shape[1], self.v.shape[1], self.w.shape[1]
        cols = ["t"]
        for name, dim in (("x", n), ("z", n), ("e", n)):
            cols += [f"{name}{k}" for k in range(dim)]
        for name, dim in (("v", m), ("pi", m), ("u", m), ("w", p)):
            cols += [f"{name}{k}" for k in range(dim)]
        cols += ["objective", "solver_iterations"]
        rows = np.full((T + 1, len(cols)), np.nan)
        rows[:, 0] = np.arange(T + 1)
        rows[:, 1 : 1 + 3 * n] = np.hstack([self.x, self.z, self.e])
        rows[:T, 1 + 3 * n : 1 + 3 * n + 3 * m + p] = np.hstack(
            [self.v, self.pi, self.u, self.w]
        )
        rows[:T, -2] = self.objective
        rows[:T, -1] = self.solver_iterations
        pd.DataFrame(rows, columns=cols).to_csv(csv_path, index=False, float_format="%.17g")
        csv_path.with_suffix(".meta.json").write_text(json.dumps(self.metadata, indent=2))

    @staticmethod
    def load(csv_path) -> "TrajectoryLog":
        csv_path = Path(csv_path)
        frame = pd.read_csv(csv_path, float_precision="round_trip")
        meta_path = csv_path.with_suffix(".meta.json")
        metadata = json.loads(meta_path.read_text()) if meta_path.exists() else {}

        def block(prefix):
            names = [c for c in frame.columns if c.startswith(prefix)
                     and c[len(prefix):].isdigit()]
            names.sort(key=lambda c: int(c[len(prefix):]))
            return frame[names].to_numpy()

        x = block("x")
        v = block("v")[:-1]
        return TrajectoryLog(
            x=x,
            z=block("z"),
            e=block("e"),
            v=v,
            pi=block("pi")[:-1],
            u=block("u")[:-1],
            w=block("w")[:-1],
            objective=frame["objective"].to_numpy()[:-1],
            solver_iterations=frame["solver_iterations"].to_numpy()[:-1],
            metadata=metadata,
        )


def assemble_tube_input(model, tube, e) -> np.ndarray:
    """Stacked tube feedback pi(e) over all subsystems."""
    pi = np.empty(model.nu_total)
    for s in model.subsystems:
        nbh = e[model.neighborhood_state_indices(s.index)][None, :]
        pi[model.input_slice(s.index)] = tube_feedback_batch(tube, s.index, nbh)[0]
    return pi


def closed_loop_run(mpc: DistributedStochasticMpc, realization, x0, steps=None,
                    metadata=None) -> TrajectoryLog:
    """Simulate the controlled network under one disturbance realization.

    ``realization`` is (T, P) or longer; the run length defaults to the
    tightening horizon minus the prediction horizon. The realized history
    w(0..t-1) is passed to the controller for conditional cost sampling.
    """
    model = mpc.model
    realization = np.asarray(realization, dtype=float)
    if realization.ndim != 2 or realization.shape[1] != model.nw_total:
        raise DimensionMismatch(f"realization shape {realization.shape}")
    horizon = mpc.tightening.horizon
    T = horizon - mpc.N if steps is None else int(steps)
    if T < 1:
        raise ConfigError(f"run length {T} must be >= 1")
    if realization.shape[0] < T:
        raise ConfigError(f"realization covers {realization.shape[0]} steps, need {T}")
    x0 = np.asarray(x0, dtype=float).reshape(-1)

    n, m, p = model.nx_total, model.nu_total, model.nw_total
    log = TrajectoryLog(
        x=np.empty((T + 1, n)),
        z=np.empty((T + 1, n)),
        e=np.empty((T + 1, n)),
        v=np.empty((T, m)),
        pi=np.empty((T, m)),
        u=np.empty((T, m)),
        w=np.empty((T, p)),
        objective=np.empty(T),
        solver_iterations=np.empty(T, dtype=float),
        metadata=metadata or {},
    )
    x = x0.copy()
    state = mpc.initial_state(x0)
    for t in range(T):
        result = mpc.step(state, x, realization[:t])
        e = x - state.z
        pi = assemble_tube_input(model, mpc.tube, e)
        u = result.applied + pi
        log.x[t], log.z[t], log.e[t] = x, state.z, e
        log.v[t], log.pi[t], log.u[t], log.w[t] = result.applied, pi, u, realization[t]
        log.objective[t] = result.objective
        log.solver_iterations[t] = result.report.iterations
        x = model.step(x, u, realization[t])
        state = result.state
    log.x[T], log.z[T] = x, state.z
    log.e[T] = x - state.z
    return log


def _run_one(args):
    mpc, realization, x0, steps, metadata = args
    return closed_loop_run(mpc, realization, x0, steps, metadata)


def monte_carlo_runs(mpc, x0, num_runs, seed, steps=None, threads=1,
                     metadata=None) -> list[TrajectoryLog]:
    """Independent closed-loop runs over freshly drawn realizations.

    Run r uses the scenario substream (seed, r), so results are independent
    of ``threads`` and reproducible.
    """
    horizon = mpc.tightening.horizon
    bank = generate_bank(mpc.dist_spec, mpc.model, horizon, num_runs, seed)
    jobs = []
    for r in range(num_runs):
        meta = dict(metadata or {})
        meta.update({"run": r, "realization_seed": seed})
        jobs.append((mpc, bank.samples[r], x0, steps, meta))
    if threads <= 1:
        return [_run_one(job) for job in jobs]
    with ProcessPoolExecutor(max_workers=threads) as pool:
        return list(pool.map(_run_one, jobs))


@dataclass
class ViolationReport:
    """Empirical chance-constraint violation frequencies across runs."""

    per_step: pd.DataFrame  # kind,i,j,t,violations,runs,frequency,ci_low,ci_high
    aggregate: pd.DataFrame  # kind,i,j,mean_frequency,max_frequency,total_violations

    def save(self, per_step_path, aggregate_path=None):
        self.per_step.to_csv(per_step_path, index=False)
        if aggregate_path is not None:
            self.aggregate.to_csv(aggregate_path, index=False)

    def max_frequency(self, kind=None) -> float:
        frame = self.per_step
        if kind is not None:
            frame = frame[frame["kind"] == kind]
        return float(frame["frequency"].max()) if len(frame) else 0.0


def _wilson_interval(successes, trials, confidence):
    from scipy.stats import norm

    if trials == 0:
        return 0.0, 1.0
    z = norm.ppf(0.5 + confidence / 2.0)
    phat = successes / trials
    denom = 1.0 + z**2 / trials
    center = (phat + z**2 / (2 * trials)) / denom
    half = z * np.sqrt(phat * (1 - phat) / trials + z**2 / (4 * trials**2)) / denom
    return max(0.0, center - half), min(1.0, center + half)


def violation_report(logs, constraints, model, confidence=0.95) -> ViolationReport:
    """Count h'x > 1 (state) and h'u > 1 (input) events per constraint and step.

    Frequencies are across runs at fixed t, with Wilson confidence intervals
    at the configured level; the aggregate view summarizes over time.
    """
    if not logs:
        raise ConfigError("need at least one trajectory log")
    steps = min(log.steps for log in logs)
    runs = len(logs)
    x = np.stack([log.x[: steps + 1] for log in logs])  # (runs, steps+1, n)
    u = np.stack([log.u[:steps] for log in logs])
    rows = []
    for i in range(model.M):
        for kind, entries, data, t_max in (
            ("state", constraints.state_for(i), x[:, :, model.state_slice(i)], steps + 1),
            ("input", constraints.input_for(i), u[:, :, model.input_slice(i)], steps),
        ):
            for j, hs in enumerate(entries):
                proj = data @ hs.direction  # (runs, t_max)
                hits = proj > 1.0
                for t in range(t_max):
                    count = int(hits[:, t].sum())
                    lo, hi = _wilson_interval(count, runs, confidence)
                    rows.append(
                        {"kind": kind, "i": i, "j": j, "t": t, "violations": count,
                         "runs": runs, "frequency": count / runs,
                         "ci_low": lo, "ci_high": hi, "probability_level": hs.probability}
                    )
    per_step = pd.DataFrame(rows)
    if len(per_step):
        aggregate = (
            per_step.groupby(["kind", "i", "j"], as_index=False)
            .agg(
                mean_frequency=("frequency", "mean"),
                max_frequency=("frequency", "max"),
                total_violations=("violations", "sum"),
                probability_level=("probability_level", "first"),
            )
        )
    else:
        aggregate = pd.DataFrame(
            columns=["kind", "i", "j", "mean_frequency", "max_frequency",
                     "total_violations", "probability_level"]
        )
    return ViolationReport(per_step=per_step, aggregate=aggregate)


def nominal_input_violations(logs, constraints, model, tightening, tol=1e-8) -> int:
    """Count tightened nominal-input violations h'v > 1 - c across all logs.

    The QP enforces these rows, so any count above zero (beyond solver
    tolerance) indicates a solver accuracy problem.
    """
    count = 0
    for log in logs:
        for i in range(model.M):
            for j, hs in enumerate(constraints.input_for(i)):
                proj = log.v[:, model.input_slice(i)] @ hs.direction
                for t in range(log.steps):
                    if proj[t] > 1.0 - tightening.input_value(i, j, t) + tol:
                        count += 1
    return count
