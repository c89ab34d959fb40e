"""Indirect-feedback stochastic MPC over the nominal system.

Each control step solves a convex QP in the nominal inputs and states. The
carried nominal state is pinned by an equality row -- never reset to the
measurement -- so feasibility is inherited from step to step, while the
measured state enters only through the sampled error predictions in the
cost. The decision stack per agent is z_i(0..N) followed by v_i(0..N-1);
every constraint row of agent i touches variables of its neighborhood only,
which is what the distributed solver exploits.

The sample-average cost expands exactly for quadratic stage costs:

    mean_s l(z + e_s, v + pi_s) = z'Qz + v'Rv + 2 mean(e)'Qz
                                  + 2 mean(pi)'Rv + second-moment constant,

so only sample means enter the linear term and the constant carries the
second moments.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .disturbance import conditional_samples
from .errors import ConfigError, DimensionMismatch, InfeasibleProblem
from .errorsim import roll_errors
from .qp import AgentBlocks, QpProblem, RowLabel, TripletBuilder
from .solver import SolveReport, solve_centralized


def _resolve(weight, t):
    w = weight(t) if callable(weight) else weight
    return np.atleast_2d(np.asarray(w, dtype=float))


@dataclass
class CostSpec:
    """Per-subsystem quadratic weights and cost-sampling configuration.

    Weights are matrices (or callables of absolute time t for the
    time-varying case). ``mpc_samples`` is the number of conditional
    disturbance trajectories behind the sample-average cost; ``sample_mode``
    "per-step" draws fresh samples from the (seed, t) substream each step,
    "frozen" reuses one set of standard normal innovations for every step.
    """

    state_weights: dict[int, object]
    input_weights: dict[int, object]
    terminal_weights: dict[int, object]
    mpc_samples: int = 10
    sample_mode: str = "per-step"

    def __post_init__(self):
        if self.sample_mode not in ("per-step", "frozen"):
            raise ConfigError(f"unknown sample mode {self.sample_mode!r}")
        if self.mpc_samples < 1:
            raise ConfigError("need at least one cost sample")

    def state_weight(self, i, t) -> np.ndarray:
        return _resolve(self.state_weights[i], t)

    def input_weight(self, i, t) -> np.ndarray:
        return _resolve(self.input_weights[i], t)

    def terminal_weight(self, i) -> np.ndarray:
        return _resolve(self.terminal_weights[i], 0)

    @staticmethod
    def uniform(model, state=1.0, input=1.0, terminal=None,
                mpc_samples=10, sample_mode="per-step") -> "CostSpec":
        """Scalar weights replicated across subsystems; terminal defaults to
        the state weight."""
        terminal = state if terminal is None else terminal
        return CostSpec(
            state_weights={s.index: float(state) * np.eye(s.nx) for s in model.subsystems},
            input_weights={s.index: float(input) * np.eye(s.nu) for s in model.subsystems},
            terminal_weights={s.index: float(terminal) * np.eye(s.nx) for s in model.subsystems},
            mpc_samples=mpc_samples,
            sample_mode=sample_mode,
        )

    def validate_against(self, model, t=0):
        for s in model.subsystems:
            Q = self.state_weight(s.index, t)
            R = self.input_weight(s.index, t)
            P = self.terminal_weight(s.index)
            if Q.shape != (s.nx, s.nx) or P.shape != (s.nx, s.nx) or R.shape != (s.nu, s.nu):
                raise DimensionMismatch(f"cost weight shape mismatch for subsystem {s.index}")
            for name, W in (("state", Q), ("terminal", P)):
                if np.min(np.linalg.eigvalsh((W + W.T) / 2)) < -1e-10:
                    raise ConfigError(f"{name} weight of subsystem {s.index} is not PSD")
            if np.min(np.linalg.eigvalsh((R + R.T) / 2)) <= 0:
                raise ConfigError(f"input weight of subsystem {s.index} must be positive definite")


@dataclass
class ControllerState:
    """Carried nominal state and shifted warm-start plans for one agent loop.

    ``z`` equals the measured state at t = 0 and is afterwards updated only
    through the nominal dynamics with the applied input, never reset from
    measurements. ``v_plan``/``z_plan`` hold the shifted previous solution
    (zero appended) used as warm start and feasibility witness.
    """

    z: np.ndarray
    v_plan: np.ndarray  # (N, m_total)
    z_plan: np.ndarray  # (N+1, n_total)
    t: int = 0


@dataclass
class ErrorPrediction:
    """Sampled error/feedback trajectories over the prediction horizon.

    ``errors`` is (S, N+1, n_total) with errors[:, 0] all equal to the
    measured error; ``feedbacks`` is (S, N+1, m_total) (the final entry is
    unused by the cost).
    """

    errors: np.ndarray
    feedbacks: np.ndarray

    @property
    def count(self) -> int:
        return self.errors.shape[0]

    @property
    def horizon(self) -> int:
        return self.errors.shape[1] - 1

    @staticmethod
    def from_samples(model, tube, e_start, w_samples) -> "ErrorPrediction":
        errors, feedbacks = roll_errors(model, tube, e_start, w_samples)
        return ErrorPrediction(errors=errors, feedbacks=feedbacks)


@dataclass
class CostTerms:
    """Sample-average cost expanded in the nominal decision variables."""

    lin_z: np.ndarray  # (N+1, n_total): gradient contribution 2*W*mean(e)
    lin_v: np.ndarray  # (N, m_total)
    constant: float


def expected_cost_terms(model, cost: CostSpec, prediction: ErrorPrediction, t) -> CostTerms:
    """Expand mean_s sum_k l(z+e_s, v+pi_s) + l_f(z_N+e_s) around (z, v).

    The quadratic part is sample-independent (the weights themselves); the
    linear part uses the sample means of errors and feedbacks at each k and
    the constant collects the second moments.
    """
    N = prediction.horizon
    S = prediction.count
    lin_z = np.zeros((N + 1, model.nx_total))
    lin_v = np.zeros((N, model.nu_total))
    constant = 0.0
    for s in model.subsystems:
        i = s.index
        e = prediction.errors[:, :, model.state_slice(i)]  # (S, N+1, n_i)
        pi = prediction.feedbacks[:, :, model.input_slice(i)]
        e_mean = e.mean(axis=0)
        pi_mean = pi.mean(axis=0)
        for k in range(N):
            Q = cost.state_weight(i, t + k)
            R = cost.input_weight(i, t + k)
            lin_z[k, model.state_slice(i)] = 2.0 * (Q @ e_mean[k])
            lin_v[k, model.input_slice(i)] = 2.0 * (R @ pi_mean[k])
            constant += float(np.einsum("sn,nm,sm->", e[:, k], Q, e[:, k])) / S
            constant += float(np.einsum("sn,nm,sm->", pi[:, k], R, pi[:, k])) / S
        P = cost.terminal_weight(i)
        lin_z[N, model.state_slice(i)] = 2.0 * (P @ e_mean[N])
        constant += float(np.einsum("sn,nm,sm->", e[:, N], P, e[:, N])) / S
    return CostTerms(lin_z=lin_z, lin_v=lin_v, constant=constant)


class _Layout:
    """Column layout: per agent, z(0..N) stacked then v(0..N-1)."""

    def __init__(self, model, N):
        self.N = N
        self.z_cols = {}
        self.v_cols = {}
        col = 0
        for s in model.subsystems:
            self.z_cols[s.index] = col + np.arange((N + 1) * s.nx).reshape(N + 1, s.nx)
            col += (N + 1) * s.nx
            self.v_cols[s.index] = col + np.arange(N * s.nu).reshape(N, s.nu)
            col += N * s.nu
        self.num_cols = col


def assemble_qp(model, constraints, tightening, cost, state, x_measured,
                prediction, t) -> QpProblem:
    """Build the control QP at time t.

    The carried nominal state is fixed by the init rows; the measurement
    enters only through ``prediction`` (whose first slice must equal
    x_measured - state.z) and thus only the linear cost. Inequality rows
    encode h' z <= 1 - c_state and h' v <= 1 - c_input at absolute times
    t..t+N-1; terminal rows force z(N) = 0.
    """
    N = state.v_plan.shape[0]
    if t + N > tightening.horizon:
        raise ConfigError(
            f"prediction window t+N = {t + N} exceeds tightening horizon {tightening.horizon}"
        )
    x_measured = np.asarray(x_measured, dtype=float).reshape(-1)
    if x_measured.shape != (model.nx_total,):
        raise DimensionMismatch(f"measured state has shape {x_measured.shape}")
    e0 = x_measured - state.z
    if prediction.horizon != N:
        raise DimensionMismatch(
            f"prediction horizon {prediction.horizon} != controller horizon {N}"
        )
    if not np.allclose(prediction.errors[:, 0], e0, atol=1e-9):
        raise ConfigError(
            "error predictions do not start from the measured error x(t) - z(t)"
        )

    layout = _Layout(model, N)
    quad = TripletBuilder()
    a_eq = TripletBuilder()
    a_in = TripletBuilder()
    b_eq, b_in = [], []
    eq_labels, in_labels = [], []
    terms = expected_cost_terms(model, cost, prediction, t)
    lin = np.zeros(layout.num_cols)
    agents = []

    # quadratic and linear cost terms
    for s in model.subsystems:
        i = s.index
        zc, vc = layout.z_cols[i], layout.v_cols[i]
        for k in range(N):
            _add_sym_block(quad, zc[k], 2.0 * cost.state_weight(i, t + k))
            _add_sym_block(quad, vc[k], 2.0 * cost.input_weight(i, t + k))
            lin[zc[k]] = terms.lin_z[k, model.state_slice(i)]
            lin[vc[k]] = terms.lin_v[k, model.input_slice(i)]
        _add_sym_block(quad, zc[N], 2.0 * cost.terminal_weight(i))
        lin[zc[N]] = terms.lin_z[N, model.state_slice(i)]

    row_eq = 0
    row_in = 0
    for s in model.subsystems:
        i = s.index
        zc, vc = layout.z_cols[i], layout.v_cols[i]
        agent_eq_rows = []
        agent_in_rows = []
        # init: z_i(0) = carried value
        for r in range(s.nx):
            a_eq.add_row(row_eq, [zc[0, r]], [1.0])
            b_eq.append(state.z[model.state_slice(i)][r])
            eq_labels.append(RowLabel("init", i, r, 0))
            agent_eq_rows.append(row_eq)
            row_eq += 1
        # dynamics: z_i(k+1) - A_{N_i} z_{N_i}(k) - B_i v_i(k) = 0
        a_ni = model.neighborhood_block(i)
        for k in range(N):
            nbr_cols = np.concatenate([layout.z_cols[j][k] for j in s.neighbors()]) \
                if s.neighbors() else np.zeros(0, dtype=int)
            for r in range(s.nx):
                cols = np.concatenate([[zc[k + 1, r]], nbr_cols, vc[k]])
                vals = np.concatenate([[1.0], -a_ni[r], -s.B[r]])
                a_eq.add_row(row_eq, cols, vals)
                b_eq.append(0.0)
                eq_labels.append(RowLabel("dynamics", i, r, k))
                agent_eq_rows.append(row_eq)
                row_eq += 1
        # terminal: z_i(N) = 0
        for r in range(s.nx):
            a_eq.add_row(row_eq, [zc[N, r]], [1.0])
            b_eq.append(0.0)
            eq_labels.append(RowLabel("terminal", i, r, N))
            agent_eq_rows.append(row_eq)
            row_eq += 1
        # tightened half-spaces, k = 0..N-1
        for k in range(N):
            for j, hs in enumerate(constraints.state_for(i)):
                a_in.add_row(row_in, zc[k], hs.direction)
                b_in.append(1.0 - tightening.state_value(i, j, t + k))
                in_labels.append(RowLabel("state", i, j, k))
                agent_in_rows.append(row_in)
                row_in += 1
            for j, hs in enumerate(constraints.input_for(i)):
                a_in.add_row(row_in, vc[k], hs.direction)
                b_in.append(1.0 - tightening.input_value(i, j, t + k))
                in_labels.append(RowLabel("input", i, j, k))
                agent_in_rows.append(row_in)
                row_in += 1
        agents.append(
            AgentBlocks(
                index=i,
                z_cols=zc,
                v_cols=vc,
                eq_rows=np.asarray(agent_eq_rows, dtype=int),
                in_rows=np.asarray(agent_in_rows, dtype=int),
                neighbors=s.neighbors(),
            )
        )

    return QpProblem(
        quad=quad.build((layout.num_cols, layout.num_cols)),
        lin=lin,
        constant=terms.constant,
        a_eq=a_eq.build((row_eq, layout.num_cols)),
        b_eq=np.asarray(b_eq),
        a_in=a_in.build((row_in, layout.num_cols)),
        b_in=np.asarray(b_in),
        eq_labels=eq_labels,
        in_labels=in_labels,
        agents=agents,
        horizon=N,
    )


def _add_sym_block(builder: TripletBuilder, cols, block):
    block = np.atleast_2d(block)
    sym = (block + block.T) / 2.0
    for r in range(sym.shape[0]):
        builder.add_row(int(cols[r]), cols, sym[r])


def rollout_nominal(model, z0, v_plan) -> np.ndarray:
    """Exact nominal rollout z(k+1) = A z(k) + B v(k)."""
    N = v_plan.shape[0]
    out = np.empty((N + 1, model.nx_total))
    out[0] = z0
    zero_w = np.zeros(model.nw_total)
    for k in range(N):
        out[k + 1] = model.step(out[k], v_plan[k], zero_w)
    return out


@dataclass
class StepResult:
    """One closed-loop MPC step: applied input, plans, and solve telemetry."""

    applied: np.ndarray  # v(t) = v*(0|t), stacked
    state: ControllerState  # state for time t+1
    v_plan: np.ndarray  # (N, m_total) optimal nominal inputs
    z_plan: np.ndarray  # (N+1, n_total) exact rollout under v_plan
    qp: QpProblem
    report: SolveReport
    objective: float
    prediction: ErrorPrediction


class DistributedStochasticMpc:
    """Receding-horizon controller with carried nominal state.

    Owns the model, constraint set, tube controller, tightening table, cost
    and disturbance description. ``solver`` is "central" or "admm"; the
    distributed path partitions each QP by agent and runs consensus rounds
    over the neighbor graph.
    """

    def __init__(self, model, constraints, tube, tightening, cost, horizon,
                 dist_spec, seed=0, solver="central", central_tol=1e-8,
                 admm_params=None):
        model.require_valid()
        tube.validate_against(model)
        cost.validate_against(model)
        if solver not in ("central", "admm"):
            raise ConfigError(f"unknown solver {solver!r}")
        if horizon < 1:
            raise ConfigError("prediction horizon must be >= 1")
        self.model = model
        self.constraints = constraints
        self.tube = tube
        self.tightening = tightening
        self.cost = cost
        self.N = int(horizon)
        self.dist_spec = dist_spec
        self.seed = int(seed)
        self.solver = solver
        self.central_tol = central_tol
        self.admm_params = admm_params
        self._frozen_innovations = None
        if cost.sample_mode == "frozen":
            rng = np.random.default_rng(np.random.SeedSequence(entropy=self.seed,
                                                               spawn_key=(0xF0,)))
            self._frozen_innovations = rng.standard_normal(
                (cost.mpc_samples, self.N, model.nw_total)
            )

    def initial_state(self, x0) -> ControllerState:
        x0 = np.asarray(x0, dtype=float).reshape(-1)
        if x0.shape != (self.model.nx_total,):
            raise DimensionMismatch(f"initial state shape {x0.shape}")
        v_plan = np.zeros((self.N, self.model.nu_total))
        return ControllerState(
            z=x0.copy(), v_plan=v_plan, z_plan=rollout_nominal(self.model, x0, v_plan), t=0
        )

    def predict_errors(self, state, x_measured, w_history) -> ErrorPrediction:
        """Conditional error predictions from the measured error e(t)."""
        e0 = np.asarray(x_measured, dtype=float) - state.z
        w_samples = conditional_samples(
            self.dist_spec, self.model, w_history, state.t, self.N,
            self.cost.mpc_samples, self.seed, innovations=self._frozen_innovations,
        )
        return ErrorPrediction.from_samples(self.model, self.tube, e0, w_samples)

    def step(self, state, x_measured, w_history=None) -> StepResult:
        """Solve the QP at the current time, apply v*(0|t), carry z forward."""
        w_history = np.zeros((0, self.model.nw_total)) if w_history is None else w_history
        prediction = self.predict_errors(state, x_measured, w_history)
        problem = assemble_qp(
            self.model, self.constraints, self.tightening, self.cost, state,
            x_measured, prediction, state.t,
        )
        try:
            report = self._solve(problem, state)
        except InfeasibleProblem as exc:
            hint = (
                " (t = 0: the initial state violates the tightened constraints)"
                if state.t == 0
                else ""
            )
            raise InfeasibleProblem(
                f"MPC QP infeasible at t={state.t}{hint}: {exc}",
                violated_rows=exc.violated_rows,
            ) from exc
        v_plan = self._extract_inputs(problem, report.solution)
        z_plan = rollout_nominal(self.model, state.z, v_plan)
        shifted_v = np.vstack([v_plan[1:], np.zeros((1, self.model.nu_total))])
        new_state = ControllerState(
            z=z_plan[1].copy(),
            v_plan=shifted_v,
            z_plan=rollout_nominal(self.model, z_plan[1], shifted_v),
            t=state.t + 1,
        )
        return StepResult(
            applied=v_plan[0].copy(),
            state=new_state,
            v_plan=v_plan,
            z_plan=z_plan,
            qp=problem,
            report=report,
            objective=problem.objective_value(report.solution),
            prediction=prediction,
        )

    def _solve(self, problem, state) -> SolveReport:
        if self.solver == "central":
            return solve_centralized(problem, tol=self.central_tol)
        from .admm import AdmmParameters, partition_problem, solve_admm
        from .errors import NotConverged

        params = self.admm_params or AdmmParameters()
        warm = np.zeros(problem.num_vars)
        for blocks in problem.agents:
            sl_x = self.model.state_slice(blocks.index)
            sl_u = self.model.input_slice(blocks.index)
            for k in range(self.N + 1):
                warm[blocks.z_cols[k]] = state.z_plan[k, sl_x]
            for k in range(self.N):
                warm[blocks.v_cols[k]] = state.v_plan[k, sl_u]
        report = solve_admm(partition_problem(problem, self.model), params, warm_start=warm)
        if not report.converged:
            raise NotConverged(
                f"ADMM did not converge within {params.max_iters} rounds at t={state.t}",
                report=report,
            )
        return report

    def _extract_inputs(self, problem, solution) -> np.ndarray:
        v_plan = np.empty((self.N, self.model.nu_total))
        for blocks in problem.agents:
            sl = self.model.input_slice(blocks.index)
            for k in range(self.N):
                v_plan[k, sl] = solution[blocks.v_cols[k]]
        return v_plan


def mpc_step(controller: DistributedStochasticMpc, state, x_measured, w_history=None):
    """One receding-horizon step; returns (applied input, new state, result)."""
    result = controller.step(state, x_measured, w_history)
    return result.applied, result.state, result
