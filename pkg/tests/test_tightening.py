import numpy as np
import pytest

from dsmpc.disturbance import DisturbanceSpec, ScenarioBank, generate_bank
from dsmpc.errors import ConfigError
from dsmpc.errorsim import TubeController, propagate_error_covariance, simulate_error_bank
from dsmpc.network import ConstraintSet, HalfSpace
from dsmpc.tightening import (
    TighteningTable,
    analytic_table,
    analytic_tightening,
    discard_count,
    tighten_all,
    tighten_halfspace,
)
from util import single_agent


def greedy_discard_oracle(direction, samples, n_d):
    """Iterative argmax-discard loop, lowest index wins ties.

    Projections use the same matrix product as the implementation; the
    oracle's independence is the discard loop itself.
    """
    proj = (np.atleast_2d(samples) @ np.asarray(direction, dtype=float)).tolist()
    alive = list(range(len(proj)))
    for _ in range(n_d):
        best = max(alive, key=lambda l: (proj[l], -l))
        alive.remove(best)
    return max(proj[l] for l in alive)


def test_discard_count_examples():
    assert discard_count(100, 0.9, 0.01) == 0  # raw value ~0.403
    assert discard_count(1000, 0.9, 1e-6) == 47  # raw value ~47.44
    assert discard_count(500, 1.0, 0.5) == 0
    with pytest.raises(ConfigError):
        discard_count(100, 0.0, 0.01)
    with pytest.raises(ConfigError):
        discard_count(100, 0.9, 1.5)


def test_tighten_halfspace_all_zeros():
    assert tighten_halfspace([1.0], np.zeros((40, 1)), 0.9, 0.5) == 0.0


def test_tighten_halfspace_plain_max_and_discards():
    samples = np.arange(1.0, 11.0)[:, None]
    # beta ~ 1: N_d = floor(0.9*10 - eps) -> spec p drives how many drop
    assert tighten_halfspace([1.0], samples, 0.999, 0.5) == 10.0  # N_d = 0
    # force N_d = 2 via a permissive (p, beta) pair and cross-check the oracle
    p, beta = 0.7, 0.9
    nd = discard_count(10, p, beta)
    assert nd == 2
    c = tighten_halfspace([1.0], samples, p, beta)
    assert c == 8.0
    assert c == greedy_discard_oracle([1.0], samples, nd)


def test_tighten_halfspace_matches_greedy_oracle_random():
    rng = np.random.default_rng(3)
    for _ in range(25):
        n = int(rng.integers(5, 60))
        samples = rng.standard_normal((n, 2))
        h = rng.standard_normal(2)
        p = float(rng.uniform(0.4, 0.99))
        beta = float(rng.uniform(0.05, 0.9))
        nd = discard_count(n, p, beta)
        if n - nd < 1:
            continue
        assert tighten_halfspace(h, samples, p, beta) == pytest.approx(
            greedy_discard_oracle(h, samples, nd), abs=0.0
        )


def test_tighten_halfspace_tie_break_deterministic():
    samples = np.array([[2.0], [2.0], [1.0], [2.0]])
    p, beta = 0.5, 0.9
    nd = discard_count(4, p, beta)
    assert nd == 1
    assert tighten_halfspace([1.0], samples, p, beta) == 2.0
    assert tighten_halfspace([1.0], samples, p, beta) == greedy_discard_oracle(
        [1.0], samples, nd
    )


def test_tighten_halfspace_rejects_discarding_everything():
    with pytest.raises(ConfigError):
        tighten_halfspace([1.0], np.zeros((0, 1)), 0.9, 0.1)


def build_scalar_setup(n_s=200, horizon=6, seed=11, a=1.01, gain=-0.5):
    model = single_agent(a=a)
    ctl = TubeController.own_state_gain(model, gain)
    spec = DisturbanceSpec(kind="iid-gaussian", covariance=1.0)
    bank = generate_bank(spec, model, horizon=horizon, count=n_s, seed=seed)
    eb = simulate_error_bank(model, ctl, bank)
    cs = ConstraintSet(
        [
            HalfSpace.normalized(0, "state", [1.0], 5.0, 0.9),
            HalfSpace.normalized(0, "input", [1.0], 1.0, 0.9),
        ]
    )
    return model, ctl, bank, eb, cs


def test_tighten_all_zero_at_t0_and_consistency():
    model, ctl, bank, eb, cs = build_scalar_setup()
    table = tighten_all(model, cs, eb, ctl, beta=0.01)
    assert table.state_value(0, 0, 0) == 0.0
    t = 3
    direct = tighten_halfspace(
        cs.state_for(0)[0].direction, eb.errors_at(model, 0, t), 0.9, 0.01
    )
    assert table.state_value(0, 0, t) == direct
    direct_u = tighten_halfspace(
        cs.input_for(0)[0].direction, eb.feedbacks_at(model, 0, t), 0.9, 0.01
    )
    assert table.input_value(0, 0, t) == direct_u


def test_tighten_all_invariant_to_sample_order():
    model, ctl, bank, eb, cs = build_scalar_setup()
    table = tighten_all(model, cs, eb, ctl, beta=0.01)
    rng = np.random.default_rng(0)
    perm = rng.permutation(bank.count)
    shuffled = ScenarioBank(bank.samples[perm], bank.seed, bank.spec)
    eb2 = simulate_error_bank(model, ctl, shuffled)
    table2 = tighten_all(model, cs, eb2, ctl, beta=0.01)
    assert np.array_equal(table.state[0], table2.state[0])
    assert np.array_equal(table.input[0], table2.input[0])


def test_tightening_monotone_in_discards_and_level():
    rng = np.random.default_rng(9)
    samples = rng.standard_normal((500, 1))
    h = [1.0]
    beta = 1e-3
    values = [tighten_halfspace(h, samples, p, beta) for p in (0.5, 0.7, 0.9, 0.99)]
    n_ds = [discard_count(500, p, beta) for p in (0.5, 0.7, 0.9, 0.99)]
    assert sorted(n_ds, reverse=True) == n_ds  # larger p, fewer discards
    assert sorted(values) == values  # larger p, larger-or-equal c


def test_table_determinism():
    model, ctl, bank, eb, cs = build_scalar_setup()
    t1 = tighten_all(model, cs, eb, ctl, beta=0.01)
    t2 = tighten_all(model, cs, eb, ctl, beta=0.01)
    assert np.array_equal(t1.state[0], t2.state[0])


def test_analytic_tightening_examples():
    assert analytic_tightening([1.0], [[0.0]], 0.9) == 0.0
    assert analytic_tightening([1.0], [[1.0]], 0.9) == pytest.approx(1.2815515655, abs=1e-9)
    assert analytic_tightening([1.0, 0.0], np.eye(2), 0.5) == pytest.approx(0.0, abs=1e-12)
    with pytest.raises(ConfigError):
        analytic_tightening([1.0], [[-1.0]], 0.9)


def test_analytic_table_matches_pointwise_formula():
    model = single_agent(a=1.0)
    ctl = TubeController.own_state_gain(model, -0.5)
    covs = propagate_error_covariance(model, ctl, 1.0, 0.0, 5)
    cs = ConstraintSet(
        [
            HalfSpace.normalized(0, "state", [1.0], 5.0, 0.9),
            HalfSpace.normalized(0, "input", [1.0], 1.0, 0.9),
        ]
    )
    table = analytic_table(model, cs, ctl, covs, 5)
    t = 4
    sig = covs.marginal(model, 0, t)
    assert table.state_value(0, 0, t) == pytest.approx(
        analytic_tightening(np.array([0.2]), sig, 0.9)
    )
    k = ctl.gains[0]
    assert table.input_value(0, 0, t) == pytest.approx(
        analytic_tightening(np.array([1.0]), k @ covs.neighborhood(model, 0, t) @ k.T, 0.9)
    )
    assert table.state_value(0, 0, 0) == 0.0


def test_table_csv_round_trip(tmp_path):
    model, ctl, bank, eb, cs = build_scalar_setup()
    table = tighten_all(model, cs, eb, ctl, beta=0.01)
    path = tmp_path / "tight.csv"
    table.save(path)
    loaded = TighteningTable.load(path)
    assert loaded.horizon == table.horizon
    assert loaded.num_samples == table.num_samples
    assert np.array_equal(loaded.state[0], table.state[0])
    assert np.array_equal(loaded.input[0], table.input[0])
    assert loaded.state_meta[0] == table.state_meta[0]
