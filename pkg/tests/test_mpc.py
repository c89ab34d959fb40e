import numpy as np
import pytest

from dsmpc.disturbance import DisturbanceSpec, generate_bank
from dsmpc.errors import ConfigError, InfeasibleProblem
from dsmpc.errorsim import TubeController, simulate_error_bank
from dsmpc.mpc import (
    ControllerState,
    CostSpec,
    DistributedStochasticMpc,
    ErrorPrediction,
    assemble_qp,
    expected_cost_terms,
    mpc_step,
    rollout_nominal,
)
from dsmpc.solver import solve_centralized
from dsmpc.tightening import TighteningTable, tighten_all
from util import box_constraints, scalar_network, single_agent


def make_controller(model, *, x_bound=5.0, u_bound=2.0, horizon=4, task=16,
                    cov=0.04, rho=0.0, mean=0.0, n_s=30, q=1.0, r=5.0,
                    seed=5, solver="central", mpc_samples=4):
    cs = box_constraints(model, x_bound=x_bound, u_bound=u_bound)
    tube = TubeController.own_state_gain(model, -0.5)
    kind = "iid-gaussian" if rho == 0.0 else "ar1-gaussian"
    spec = DisturbanceSpec(kind=kind, covariance=cov, rho=rho, mean=mean)
    bank = generate_bank(spec, model, task, n_s, seed=seed + 1)
    table = tighten_all(model, cs, simulate_error_bank(model, tube, bank), tube, beta=0.01)
    cost = CostSpec.uniform(model, q, r, mpc_samples=mpc_samples)
    mpc = DistributedStochasticMpc(model, cs, tube, table, cost, horizon, spec,
                                   seed=seed, solver=solver)
    return mpc


def zero_prediction(model, count, horizon, e0=None):
    e0 = np.zeros(model.nx_total) if e0 is None else np.asarray(e0, dtype=float)
    errors = np.tile(e0, (count, horizon + 1, 1))
    return ErrorPrediction(
        errors=errors, feedbacks=np.zeros((count, horizon + 1, model.nu_total))
    )


def test_expected_cost_zero_samples_reduce_to_nominal():
    model = single_agent(a=1.0)
    cost = CostSpec.uniform(model, 1.0, 2.0)
    pred = zero_prediction(model, 3, 4)
    terms = expected_cost_terms(model, cost, pred, 0)
    assert np.array_equal(terms.lin_z, np.zeros((5, 1)))
    assert np.array_equal(terms.lin_v, np.zeros((4, 1)))
    assert terms.constant == 0.0


def test_expected_cost_symmetric_samples():
    # two samples e in {-1, +1}: linear term vanishes, stage constant is 1
    model = single_agent(a=1.0)
    cost = CostSpec(
        state_weights={0: np.eye(1)},
        input_weights={0: np.eye(1)},
        terminal_weights={0: np.zeros((1, 1))},
    )
    errors = np.zeros((2, 2, 1))
    errors[0, :, 0] = -1.0
    errors[1, :, 0] = 1.0
    pred = ErrorPrediction(errors=errors, feedbacks=np.zeros((2, 2, 1)))
    terms = expected_cost_terms(model, cost, pred, 0)
    assert terms.lin_z[0, 0] == 0.0
    assert terms.constant == pytest.approx(1.0)


def test_saa_argmin_equals_mean_shortcut():
    # same sample mean, different spread: minimizers agree for quadratic cost
    model = single_agent(a=0.9)
    mpc = make_controller(model, cov=0.0)
    state = mpc.initial_state(np.array([1.0]))
    spread = np.array([0.4, -0.2, 0.1, -0.3])[:, None]
    base = np.full((4, mpc.N + 1, 1), 0.25)
    wide = base + np.concatenate([np.zeros((4, 1, 1)), np.tile(spread[:, None], (1, mpc.N, 1))], axis=1)
    # both predictions must start at the measured error
    x = state.z + 0.25
    pred_mean = zero_prediction(model, 4, mpc.N, e0=[0.25])
    pred_wide = ErrorPrediction(errors=wide, feedbacks=np.zeros((4, mpc.N + 1, 1)))
    qp_a = assemble_qp(model, mpc.constraints, mpc.tightening, mpc.cost, state, x, pred_mean, 0)
    qp_b = assemble_qp(model, mpc.constraints, mpc.tightening, mpc.cost, state, x, pred_wide, 0)
    assert np.allclose(pred_mean.errors.mean(axis=0), pred_wide.errors.mean(axis=0))
    sol_a = solve_centralized(qp_a).solution
    sol_b = solve_centralized(qp_b).solution
    assert np.allclose(sol_a, sol_b, atol=1e-7)


def test_zero_tightening_equals_nominal_mpc():
    model = single_agent(a=1.0)
    mpc = make_controller(model, cov=0.0)
    zero_table = TighteningTable.zeros(model, mpc.constraints, mpc.tightening.horizon)
    state = mpc.initial_state(np.array([0.5]))
    pred = zero_prediction(model, 2, mpc.N)
    x = state.z.copy()
    qp = assemble_qp(model, mpc.constraints, zero_table, mpc.cost, state, x, pred, 0)
    assert np.allclose(qp.b_in, 1.0)


def test_origin_is_optimal_from_zero_state():
    model = scalar_network([1.01, 1.01], {(0, 1): 0.01, (1, 0): 0.01})
    mpc = make_controller(model, cov=0.0)
    state = mpc.initial_state(np.zeros(2))
    res = mpc.step(state, np.zeros(2), None)
    assert np.allclose(res.v_plan, 0.0, atol=1e-9)
    assert np.allclose(res.z_plan, 0.0, atol=1e-9)


def test_constraint_row_counts():
    model = scalar_network([1.01, 1.01, 1.01], {(0, 1): 0.01, (1, 0): 0.01})
    mpc = make_controller(model, horizon=4)
    state = mpc.initial_state(np.zeros(3))
    pred = mpc.predict_errors(state, np.zeros(3), np.zeros((0, 3)))
    qp = assemble_qp(model, mpc.constraints, mpc.tightening, mpc.cost, state,
                     np.zeros(3), pred, 0)
    # inequality rows: per agent N * (n_x + n_u) half-spaces
    assert qp.num_in == 3 * 4 * (2 + 2)
    terminal_rows = [lbl for lbl in qp.eq_labels if lbl.category == "terminal"]
    assert len(terminal_rows) == 3  # sum of n_i
    init_rows = [lbl for lbl in qp.eq_labels if lbl.category == "init"]
    assert len(init_rows) == 3
    dyn_rows = [lbl for lbl in qp.eq_labels if lbl.category == "dynamics"]
    assert len(dyn_rows) == 3 * 4


def test_two_step_carry_identity_and_replay():
    model = scalar_network([1.01, 1.01], {(0, 1): 0.005, (1, 0): 0.005})
    mpc = make_controller(model, cov=0.0, mean=0.2)
    x = np.array([1.0, -1.0])
    state = mpc.initial_state(x)
    res0 = mpc.step(state, x, None)
    # carried z(0|1) is exactly z(1|0)
    assert np.array_equal(res0.state.z, res0.z_plan[1])
    # solver's own z(1|0) agrees with the exact rollout
    blocks = {b.index: b for b in res0.qp.agents}
    z1_solver = np.concatenate(
        [res0.report.solution[blocks[i].z_cols[1]] for i in range(2)]
    )
    assert np.allclose(z1_solver, res0.z_plan[1], atol=1e-7)
    # replay: z plan satisfies the nominal dynamics exactly
    replay = rollout_nominal(model, state.z, res0.v_plan)
    assert np.array_equal(replay, res0.z_plan)


def test_shifted_solution_is_feasible_witness():
    model = scalar_network([1.01, 1.01], {(0, 1): 0.005, (1, 0): 0.005})
    mpc = make_controller(model, cov=0.04, mean=0.1)
    x = np.array([1.0, 0.5])
    state = mpc.initial_state(x)
    rng = np.random.default_rng(0)
    w_hist = []
    for t in range(4):
        res = mpc.step(state, x, np.asarray(w_hist).reshape(-1, 2))
        witness_v = res.state.v_plan  # shifted, zero appended
        witness_z = rollout_nominal(model, res.state.z, witness_v)
        w_t = rng.normal(0.1, 0.2, size=2)
        w_hist.append(w_t)
        e = x - state.z
        pi = np.concatenate(
            [mpc.tube.gains[i] @ e[model.neighborhood_state_indices(i)] for i in range(2)]
        )
        x = model.step(x, res.applied + pi, w_t)
        state = res.state
        pred = mpc.predict_errors(state, x, np.asarray(w_hist).reshape(-1, 2))
        qp = assemble_qp(model, mpc.constraints, mpc.tightening, mpc.cost, state,
                         x, pred, state.t)
        y = np.zeros(qp.num_vars)
        for b in qp.agents:
            for k in range(mpc.N + 1):
                y[b.z_cols[k]] = witness_z[k, model.state_slice(b.index)]
            for k in range(mpc.N):
                y[b.v_cols[k]] = witness_v[k, model.input_slice(b.index)]
        eq_res, in_res = qp.residuals(y)
        assert eq_res <= 1e-6 and in_res <= 1e-6


def test_cost_only_feedback():
    model = single_agent(a=1.0)
    mpc = make_controller(model, cov=0.0, mean=0.3)
    state = mpc.initial_state(np.array([0.2]))
    for_x = {}
    for x_val in (0.2, 1.4):
        x = np.array([x_val])
        pred = mpc.predict_errors(state, x, np.zeros((0, 1)))
        for_x[x_val] = assemble_qp(model, mpc.constraints, mpc.tightening, mpc.cost,
                                   state, x, pred, 0)
    a, b = for_x[0.2], for_x[1.4]
    assert np.array_equal(a.a_eq.toarray(), b.a_eq.toarray())
    assert np.array_equal(a.b_eq, b.b_eq)
    assert np.array_equal(a.a_in.toarray(), b.a_in.toarray())
    assert np.array_equal(a.b_in, b.b_in)
    assert np.array_equal(a.quad.toarray(), b.quad.toarray())
    assert not np.array_equal(a.lin, b.lin)


def test_decoupled_network_separates():
    model = scalar_network([0.9, 1.05])
    mpc = make_controller(model, cov=0.0, mean=0.25, horizon=3)
    x = np.array([1.0, -0.8])
    res = mpc.step(mpc.initial_state(x), x, None)
    for i, a in enumerate([0.9, 1.05]):
        solo_model = single_agent(a=a)
        solo = make_controller(solo_model, cov=0.0, mean=0.25, horizon=3)
        res_solo = solo.step(solo.initial_state(x[[i]]), x[[i]], None)
        assert np.allclose(res_solo.v_plan[:, 0], res.v_plan[:, i], atol=1e-7)


def test_infeasible_tightening_reported_at_t0():
    model = single_agent(a=1.0)
    mpc = make_controller(model, cov=0.0)
    table = TighteningTable.zeros(model, mpc.constraints, mpc.tightening.horizon)
    table.state[0][:, :] = 1.5  # tightened rhs is negative: origin infeasible
    bad = DistributedStochasticMpc(model, mpc.constraints, mpc.tube, table, mpc.cost,
                                   mpc.N, mpc.dist_spec, seed=1)
    state = bad.initial_state(np.zeros(1))
    with pytest.raises(InfeasibleProblem) as err:
        bad.step(state, np.zeros(1), None)
    assert "t = 0" in str(err.value)
    assert err.value.violated_rows


def test_step_beyond_tightening_horizon_rejected():
    model = single_agent(a=1.0)
    mpc = make_controller(model, horizon=4, task=16)
    state = mpc.initial_state(np.zeros(1))
    state.t = 13  # t + N = 17 > 16
    with pytest.raises(ConfigError):
        pred = zero_prediction(model, 2, mpc.N)
        assemble_qp(model, mpc.constraints, mpc.tightening, mpc.cost, state,
                    np.zeros(1), pred, state.t)


def test_mpc_step_function_and_determinism():
    model = scalar_network([1.01, 1.01], {(0, 1): 0.005, (1, 0): 0.005})
    runs = []
    for _ in range(2):
        mpc = make_controller(model, cov=0.04, rho=0.5, seed=11)
        state = mpc.initial_state(np.array([0.5, 0.5]))
        applied, new_state, res = mpc_step(mpc, state, np.array([0.5, 0.5]), None)
        runs.append((applied, new_state.z))
    assert np.array_equal(runs[0][0], runs[1][0])
    assert np.array_equal(runs[0][1], runs[1][1])


def test_frozen_sample_mode_reuses_innovations():
    model = single_agent(a=1.0)
    cs = box_constraints(model, x_bound=5.0, u_bound=2.0)
    tube = TubeController.own_state_gain(model, -0.5)
    spec = DisturbanceSpec(kind="iid-gaussian", covariance=1.0)
    bank = generate_bank(spec, model, 12, 20, seed=2)
    table = tighten_all(model, cs, simulate_error_bank(model, tube, bank), tube, beta=0.01)
    cost = CostSpec.uniform(model, 1.0, 5.0, mpc_samples=6, sample_mode="frozen")
    mpc = DistributedStochasticMpc(model, cs, tube, table, cost, 4, spec, seed=3)
    state = mpc.initial_state(np.zeros(1))
    p0 = mpc.predict_errors(state, np.zeros(1), np.zeros((0, 1)))
    state2 = ControllerState(z=state.z, v_plan=state.v_plan, z_plan=state.z_plan, t=2)
    p2 = mpc.predict_errors(state2, np.zeros(1), np.zeros((2, 1)))
    # iid + frozen innovations: identical sampled errors at different steps
    assert np.array_equal(p0.errors, p2.errors)


def test_time_varying_weights_supported():
    model = single_agent(a=1.0)
    cost = CostSpec(
        state_weights={0: lambda t: (1.0 + t) * np.eye(1)},
        input_weights={0: np.eye(1)},
        terminal_weights={0: np.eye(1)},
    )
    pred = ErrorPrediction(errors=np.ones((1, 3, 1)), feedbacks=np.zeros((1, 3, 1)))
    terms = expected_cost_terms(model, cost, pred, t=5)
    # at absolute times 5 and 6 the state weight is 6 and 7
    assert terms.lin_z[0, 0] == pytest.approx(12.0)
    assert terms.lin_z[1, 0] == pytest.approx(14.0)


def test_qp_export_triplets(tmp_path):
    model = single_agent(a=1.0)
    mpc = make_controller(model, cov=0.0, horizon=2)
    state = mpc.initial_state(np.array([0.3]))
    pred = zero_prediction(model, 2, 2, e0=[0.0])
    qp = assemble_qp(model, mpc.constraints, mpc.tightening, mpc.cost, state,
                     np.array([0.3]), pred, 0)
    path = tmp_path / "qp.txt"
    qp.export_triplets(path)
    lines = path.read_text().strip().splitlines()
    head = lines[0].split()
    assert head[0] == "qp"
    assert int(head[1]) == qp.num_vars
    assert sum(1 for ln in lines if ln.startswith("beq ")) == qp.num_eq
    assert sum(1 for ln in lines if ln.startswith("bin ")) == qp.num_in
