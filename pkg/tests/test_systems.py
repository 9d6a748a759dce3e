import math

import numpy as np
import pytest

from odediscover.ode_sim import TimeGrid
from odediscover.systems import (
    SPLIT_ID,
    SPLIT_OOD_X0,
    SPLIT_OOD_X0_W,
    OutOfRangeError,
    UnknownSystemError,
    environment_for,
    default_noise_sigma,
    default_prefix_len,
    generate,
    get_system,
    ground_truth_field,
    split_prefix,
    split_validation,
)


def test_pendulum_field_at_zero_angle():
    sysp = get_system("pendulum")
    f = ground_truth_field(sysp, np.array([1.0, 0.2]))
    out = f(np.array([0.0, 1.0]))
    assert np.allclose(out, [1.0, -0.2], atol=1e-15)


def test_sir_field_direct_substitution():
    sysp = get_system("sir")
    f = ground_truth_field(sysp, np.array([4.0, 0.4]))
    out = f(np.array([9.0, 1.0, 0.0]))
    # N=10, beta*S*I/N = 4*9*1/10 = 3.6
    assert np.allclose(out, [-3.6, 3.2, 0.4], atol=1e-12)


def test_predator_prey_zero_params_zero_field():
    sysp = get_system("predator_prey")
    f = ground_truth_field(sysp, np.zeros(4))
    assert np.allclose(f(np.array([123.0, 45.0])), 0.0)


def test_complex_field_shape():
    sysp = get_system("complex_ode")
    f = ground_truth_field(sysp, np.array([1.0, 1.0, 1.0]))
    out = f(np.array([0.7, 0.9]))
    assert out.shape == (2,)
    assert out[0] == pytest.approx(np.sin(0.7) + np.sin(0.81), abs=1e-15)
    assert out[1] == pytest.approx(np.sin(0.7) * np.cos(0.9), abs=1e-15)


def test_unknown_system_raises():
    with pytest.raises(UnknownSystemError):
        get_system("lorenz")


def test_param_count_checked():
    with pytest.raises(ValueError):
        ground_truth_field(get_system("pendulum"), np.array([1.0]))


def test_pendulum_id_environment_sampling():
    sysp = get_system("pendulum")
    env = environment_for(sysp, SPLIT_ID)
    ds = generate(sysp, env, 50, grid=TimeGrid(0.0, 0.1, 10), prefix_len=3, seed=5, noise_sigma=0.0)
    for task in ds.tasks:
        theta0, omega0 = task.trajectory.states[0]
        assert 0.0 <= theta0 < math.pi / 2
        assert omega0 == 0.0
        alpha, rho = task.true_params
        assert 1.0 <= alpha < 2.0
        assert 0.2 <= rho < 0.4


def test_sir_ood_x0_environment_sampling():
    sysp = get_system("sir")
    env = environment_for(sysp, SPLIT_OOD_X0)
    ds = generate(sysp, env, 30, grid=TimeGrid(0.0, 0.1, 10), prefix_len=3, seed=1)
    for task in ds.tasks:
        s0, i0, r0 = task.trajectory.states[0]
        assert 90.0 <= s0 < 100.0
        assert 1.0 <= i0 < 5.0
        assert r0 == 0.0


def test_parameter_supports_disjoint_between_id_and_ood_w():
    sysp = get_system("pendulum")
    id_env = environment_for(sysp, SPLIT_ID)
    w_env = environment_for(sysp, SPLIT_OOD_X0_W)
    ds_id = generate(sysp, id_env, 40, grid=TimeGrid(0.0, 0.1, 5), prefix_len=2, seed=9)
    ds_w = generate(sysp, w_env, 40, grid=TimeGrid(0.0, 0.1, 5), prefix_len=2, seed=9)
    hi_id = np.max([t.true_params for t in ds_id.tasks], axis=0)
    lo_w = np.min([t.true_params for t in ds_w.tasks], axis=0)
    assert np.all(hi_id <= 2.0 * sysp.param_base)
    assert np.all(lo_w >= 2.0 * sysp.param_base)


def test_empty_dataset_keeps_metadata():
    sysp = get_system("pendulum")
    ds = generate(sysp, environment_for(sysp, SPLIT_ID), 0, seed=3)
    assert len(ds.tasks) == 0
    assert ds.system.name == "pendulum"
    assert ds.grid.n_steps == 100


def test_generation_deterministic_and_independent_of_n_tasks():
    sysp = get_system("pendulum")
    env = environment_for(sysp, SPLIT_ID)
    grid = TimeGrid(0.0, 0.1, 20)
    a = generate(sysp, env, 5, grid=grid, prefix_len=5, seed=123)
    b = generate(sysp, env, 5, grid=grid, prefix_len=5, seed=123)
    c = generate(sysp, env, 9, grid=grid, prefix_len=5, seed=123)
    for i in range(5):
        assert np.array_equal(a.tasks[i].trajectory.states, b.tasks[i].trajectory.states)
        assert np.array_equal(a.tasks[i].trajectory.states, c.tasks[i].trajectory.states)
        assert np.array_equal(a.tasks[i].true_params, c.tasks[i].true_params)


def test_zero_noise_matches_clean_simulation():
    sysp = get_system("sir")
    env = environment_for(sysp, SPLIT_ID)
    ds = generate(sysp, env, 3, grid=TimeGrid(0.0, 0.1, 20), prefix_len=5, seed=7, noise_sigma=0.0)
    from odediscover.ode_sim import integrate

    for task in ds.tasks:
        f = ground_truth_field(sysp, task.true_params)
        traj = integrate(f, task.trajectory.states[0], ds.grid)
        assert np.allclose(task.trajectory.states, traj.states, rtol=0, atol=0)


def test_noise_scale_is_relative_per_dimension():
    sysp = get_system("pendulum")
    env = environment_for(sysp, SPLIT_ID)
    clean = generate(sysp, env, 200, seed=11, noise_sigma=0.0)
    noisy = generate(sysp, env, 200, seed=11, noise_sigma=0.01)
    ratios = []
    for tc, tn in zip(clean.tasks, noisy.tasks):
        resid = tn.trajectory.states - tc.trajectory.states
        sd = tc.trajectory.states.std(axis=0)
        ratios.append(resid.std(axis=0) / (0.01 * sd))
    # Empirical noise scale should match the requested relative level.
    assert np.allclose(np.mean(ratios, axis=0), 1.0, atol=0.02)


def test_sir_conservation():
    sysp = get_system("sir")
    env = environment_for(sysp, SPLIT_ID)
    ds = generate(sysp, env, 5, seed=2, noise_sigma=0.0)
    for task in ds.tasks:
        n = task.trajectory.states.sum(axis=1)
        drift = np.max(np.abs(n - n[0])) / n[0]
        assert drift < 1e-6


def test_split_prefix_row_counts():
    sysp = get_system("pendulum")
    ds = generate(sysp, environment_for(sysp, SPLIT_ID), 1, seed=0)
    obs, held = split_prefix(ds.tasks[0], 33)
    assert obs.states.shape[0] == 34
    assert held.states.shape[0] == 67
    rejoined = np.vstack([obs.states, held.states])
    assert np.array_equal(rejoined, ds.tasks[0].trajectory.states)
    assert held.grid.t0 == pytest.approx(3.4)


def test_split_prefix_boundary():
    sysp = get_system("pendulum")
    ds = generate(sysp, environment_for(sysp, SPLIT_ID), 1, grid=TimeGrid(0.0, 0.1, 10), prefix_len=3, seed=0)
    obs, held = split_prefix(ds.tasks[0], 9)
    assert held.states.shape[0] == 1
    with pytest.raises(OutOfRangeError):
        split_prefix(ds.tasks[0], 10)


def test_default_prefix_lens():
    assert default_prefix_len(get_system("pendulum")) == 33
    assert default_prefix_len(get_system("predator_prey")) == 33
    assert default_prefix_len(get_system("sir")) == 10
    assert default_noise_sigma(get_system("pendulum")) == 0.01
    assert default_noise_sigma(get_system("sir")) == 0.0


def test_split_validation_deterministic():
    sysp = get_system("pendulum")
    ds = generate(sysp, environment_for(sysp, SPLIT_ID), 10, grid=TimeGrid(0.0, 0.1, 5), prefix_len=2, seed=0)
    train, val = split_validation(ds, 0.2)
    assert len(train) == 8 and len(val) == 2
    assert [t.task_id for t in val] == [8, 9]
