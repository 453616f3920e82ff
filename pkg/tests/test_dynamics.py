from __future__ import annotations

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from pacsnoc.controllers import AffineController
from pacsnoc.dynamics import (NoiseDataset, NoiseModel, RobotConfig, ScalarLTI, build_robot_system,
                              generate_dataset, make_rng, rollout, simulate)
from pacsnoc.errors import ConfigurationError, NumericalDivergenceError

from conftest import zero_noise


class _Idle:
    """Zero external input of width m."""

    def __init__(self, m):
        self.m = m

    def start(self, system):
        return lambda t, xs, us: np.zeros(np.shape(xs[-1])[:-1] + (self.m,))


def test_lti_zero_controller_hand_values(lti, zero_ctrl):
    tr = rollout(lti, zero_ctrl, zero_noise(2))
    np.testing.assert_allclose(tr.states[:, 0], [2.0, 1.6, 1.28], rtol=0, atol=1e-15)
    np.testing.assert_array_equal(tr.inputs[:, 0], [0.0, 0.0, 0.0])


def test_horizon_zero_single_state(lti):
    tr = rollout(lti, AffineController(2.0, 0.5), zero_noise(0))
    assert tr.states.shape == (1, 1)
    assert tr.states[0, 0] == 2.0
    assert tr.inputs[0, 0] == pytest.approx(-(2.0 * 2.0 + 0.5))


def test_constant_input_one_step(lti):
    tr = rollout(lti, AffineController(0.0, -3.0), zero_noise(1))
    assert tr.states[1, 0] == pytest.approx(1.9, abs=1e-15)


def test_noise_enters_additively(lti, zero_ctrl):
    w = np.array([[0.5], [0.1], [-0.2]])
    tr = rollout(lti, zero_ctrl, w)
    x0 = 2.5
    x1 = 0.8 * x0 + 0.1
    x2 = 0.8 * x1 - 0.2
    np.testing.assert_allclose(tr.states[:, 0], [x0, x1, x2], atol=1e-15)


def test_dimension_mismatch(lti, zero_ctrl):
    with pytest.raises(ConfigurationError):
        rollout(lti, zero_ctrl, np.zeros((3, 2)))


def test_divergence_names_step(zero_ctrl):
    sys = ScalarLTI(1e200, 0.0, 1.0)
    with pytest.raises(NumericalDivergenceError) as err, np.errstate(over="ignore"):
        rollout(sys, zero_ctrl, zero_noise(5))
    assert err.value.step == 2
    assert "2" in str(err.value)


def test_rollout_deterministic(lti):
    w = generate_dataset(NoiseModel.iid_gaussian([0.3], [0.09], 10), 3, seed=4).sequences[0]
    a = rollout(lti, AffineController(7.0, 3.0), w)
    b = rollout(lti, AffineController(7.0, 3.0), w)
    assert a.states.tobytes() == b.states.tobytes()
    assert a.inputs.tobytes() == b.inputs.tobytes()


def test_dataset_same_seed_identical():
    nm = NoiseModel.iid_gaussian([0.3], [0.09], 10)
    a = generate_dataset(nm, 1, seed=7)
    b = generate_dataset(nm, 1, seed=7)
    c = generate_dataset(nm, 1, seed=8)
    assert a.sequences.tobytes() == b.sequences.tobytes()
    assert not np.array_equal(a.sequences, c.sequences)
    assert a.seed == 7


def test_dataset_per_step_mean():
    nm = NoiseModel.iid_gaussian([0.3], [0.09], 10)
    d = generate_dataset(nm, 512, seed=11)
    means = d.sequences.mean(axis=0)[:, 0]
    assert np.all(np.abs(means - 0.3) < 0.05)


def test_dataset_moments_large_sample():
    nm = NoiseModel.iid_gaussian([0.3], [0.09], 0)
    x = generate_dataset(nm, 10 ** 5, seed=3).sequences.ravel()
    assert abs(x.mean() - 0.3) / 0.3 < 0.01
    assert abs(x.var() - 0.09) / 0.09 < 0.01


def test_zero_and_first_step_models():
    d = generate_dataset(NoiseModel.zero(3, 6), 5, seed=1)
    assert np.all(d.sequences == 0.0)
    f = generate_dataset(NoiseModel.first_step_only(np.zeros(8), 0.04 * np.ones(8), 20), 7, seed=2)
    assert np.all(f.sequences[:, 1:] == 0.0)
    assert np.any(f.sequences[:, 0] != 0.0)


def test_invalid_s():
    with pytest.raises(ConfigurationError):
        generate_dataset(NoiseModel.zero(1, 3), 0, seed=1)


def test_dataset_invariants_and_readonly():
    d = generate_dataset(NoiseModel.iid_gaussian([0.0, 0.0], [1.0, 1.0], 4), 3, seed=1)
    assert d.sequences.shape == (3, 5, 2)
    assert (d.s, d.horizon, d.dim) == (3, 4, 2)
    with pytest.raises(ValueError):
        d.sequences[0, 0, 0] = 1.0


def test_dataset_csv_roundtrip(tmp_path):
    d = generate_dataset(NoiseModel.iid_gaussian([0.3], [0.09], 10), 4, seed=9)
    d.save_csv(tmp_path / "d.csv")
    header = (tmp_path / "d.csv").read_text().splitlines()[0]
    assert header == "n,T,s,seed"
    e = NoiseDataset.load_csv(tmp_path / "d.csv")
    assert e.sequences.tobytes() == d.sequences.tobytes()
    assert e.seed == 9


def test_rng_streams_independent():
    a = make_rng(1, 0).random(4)
    b = make_rng(1, 1).random(4)
    assert not np.array_equal(a, b)
    assert np.array_equal(a, make_rng(1, 0).random(4))


def test_robot_dims(robots):
    assert robots.state_dim == 8 and robots.input_dim == 4
    assert robots.nominal_initial_state.shape == (8,)


def test_robot_equilibrium_at_target():
    sys = build_robot_system()
    cfg = RobotConfig.from_dict({**sys.config.to_dict(), "starts": sys.config.targets})
    sys = build_robot_system(cfg)
    tr = rollout(sys, _Idle(4), np.zeros((50, 8)))
    np.testing.assert_allclose(tr.states, np.broadcast_to(sys.x_target, tr.states.shape), atol=1e-12)


def test_robot_prestabilized_converges(robots):
    T = 400
    tr = rollout(robots, _Idle(4), np.zeros((T + 1, 8)))
    err = np.linalg.norm(tr.states[:, robots.POS] - robots.x_target[robots.POS], axis=1)
    assert err[-1] < err[0]
    # after the initial transient the error keeps shrinking
    tail = err[T // 2:]
    assert np.all(np.diff(tail) <= 1e-12)


def test_robot_bad_config():
    with pytest.raises(ConfigurationError):
        build_robot_system({"masses": [0.0, 1.0]})
    with pytest.raises(ConfigurationError):
        build_robot_system({"dt": -0.1})
    with pytest.raises(ConfigurationError):
        build_robot_system({"bogus": 1})


def test_robot_config_json_roundtrip():
    cfg = RobotConfig()
    assert RobotConfig.from_dict(cfg.to_dict()) == cfg


def test_batched_simulate_matches_loop(lti):
    data = generate_dataset(NoiseModel.iid_gaussian([0.3], [0.09], 10), 5, seed=2)
    ctrl = AffineController(6.0, 2.0)
    xs, _ = simulate(lti, ctrl, data.sequences)
    X = np.stack(xs, axis=-2)
    for i in range(data.s):
        np.testing.assert_array_equal(X[i], rollout(lti, ctrl, data.sequences[i]).states)


@settings(max_examples=30, deadline=None)
@given(k=st.floats(-1.99, 17.99), beta=st.floats(-10, 10), seed=st.integers(0, 2 ** 32 - 1))
def test_lti_stable_states_bounded(k, beta, seed):
    # |a - b k| < 1 on the gain interval, so |x_t| <= |x0| + sup|b beta + w| / (1 - |a - b k|)
    sys = ScalarLTI(0.8, 0.1, 2.0)
    T = 10 ** 4
    w = np.clip(make_rng(seed).normal(0.3, 0.3, (T + 1, 1)), -2.0, 2.0)
    tr = rollout(sys, AffineController(k, beta), w)
    rho = abs(0.8 - 0.1 * k)
    bound = 4.0 + (0.1 * abs(beta) + 2.0) / (1 - rho)
    assert np.all(np.isfinite(tr.states))
    assert np.max(np.abs(tr.states)) <= bound
