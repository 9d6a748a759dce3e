import numpy as np
import pytest

from odediscover.ode_sim import (
    Diverged,
    DivergenceGuard,
    NonFiniteError,
    TimeGrid,
    Trajectory,
    TooShortError,
    VectorField,
    estimate_derivatives,
    integrate,
    integrate_batch,
    moving_average,
    rk4_step,
    rkf45_integrate,
)

DECAY = VectorField(1, lambda x: -x)


def test_rk4_step_hand_computed_decay():
    # Four-stage hand evaluation for dx/dt = -x, x=1, h=0.1:
    # k1=-1, k2=-0.95, k3=-0.9525, k4=-0.90475 -> 0.9048375
    out = rk4_step(DECAY, np.array([1.0]), 0.1)
    assert out[0] == pytest.approx(0.9048375, abs=1e-12)


def test_rk4_step_zero_field_fixed_point():
    f = VectorField(2, lambda x: np.zeros_like(x))
    out = rk4_step(f, np.array([2.0, 3.0]), 0.1)
    assert np.array_equal(out, [2.0, 3.0])


def test_rk4_step_constant_field_exact():
    f = VectorField(1, lambda x: np.ones_like(x))
    out = rk4_step(f, np.array([0.0]), 0.5)
    assert out[0] == pytest.approx(0.5, abs=1e-15)


def test_rk4_step_rejects_nonfinite_state():
    with pytest.raises(NonFiniteError):
        rk4_step(DECAY, np.array([np.nan]), 0.1)


def test_rk4_step_rejects_bad_step():
    with pytest.raises(ValueError):
        rk4_step(DECAY, np.array([1.0]), 0.0)


def test_integrate_exponential_decay_endpoint():
    traj = integrate(DECAY, np.array([1.0]), TimeGrid(0.0, 0.1, 10))
    assert isinstance(traj, Trajectory)
    assert traj.states[-1, 0] == pytest.approx(np.exp(-1.0), abs=1e-6)


def test_integrate_blowup_returns_diverged():
    f = VectorField(1, lambda x: x**2)
    out = integrate(f, np.array([1.0]), TimeGrid(0.0, 0.1, 30))
    assert isinstance(out, Diverged)
    assert out.last_valid_index < 30
    assert np.all(np.isfinite(out.partial_states))


def test_integrate_single_step_shape():
    traj = integrate(DECAY, np.array([1.0]), TimeGrid(0.0, 0.1, 1))
    assert traj.states.shape == (2, 1)


def test_rk4_order_halving_dt():
    # Endpoint error should drop ~16x when dt halves (4th order).
    def endpoint_err(dt):
        n = int(round(1.0 / dt))
        traj = integrate(DECAY, np.array([1.0]), TimeGrid(0.0, dt, n), n_sub=1)
        return abs(traj.states[-1, 0] - np.exp(-1.0))

    ratio = endpoint_err(0.1) / endpoint_err(0.05)
    assert 12.0 <= ratio <= 20.0


def test_integrate_nsub1_matches_repeated_rk4_on_linear_field():
    a = np.array([[0.0, 1.0], [-2.0, -0.3]])
    f = VectorField(2, lambda x: x @ a.T)
    grid = TimeGrid(0.0, 0.1, 20)
    traj = integrate(f, np.array([1.0, 0.0]), grid, n_sub=1)
    x = np.array([1.0, 0.0])
    for l in range(grid.n_steps):
        x = rk4_step(f, x, grid.dt)
        assert np.allclose(traj.states[l + 1], x, rtol=0, atol=0)


def test_integrate_batch_freezes_diverged_rows():
    f = VectorField(1, lambda x: x**2)
    x0 = np.array([[1.0], [0.0]])
    states, last_valid = integrate_batch(f, x0, TimeGrid(0.0, 0.1, 30))
    assert last_valid[0] < 30 and last_valid[1] == 30
    assert np.all(np.isfinite(states))


def test_guard_threshold_is_configurable():
    f = VectorField(1, lambda x: x)
    out = integrate(f, np.array([1.0]), TimeGrid(0.0, 0.1, 100), guard=DivergenceGuard(max_norm=10.0))
    assert isinstance(out, Diverged)


def test_rkf45_matches_rk4_on_decay():
    grid = TimeGrid(0.0, 0.1, 10)
    a = rkf45_integrate(DECAY, np.array([1.0]), grid)
    assert isinstance(a, Trajectory)
    assert a.states[-1, 0] == pytest.approx(np.exp(-1.0), abs=1e-7)


def test_estimate_derivatives_quadratic_exact_interior():
    grid = TimeGrid(0.0, 0.1, 10)
    t = grid.times()
    traj = Trajectory(grid, (t**2)[:, None])
    d = estimate_derivatives(traj)
    # Central differences are exact on quadratics; t=0.2 is index 2.
    assert d[2, 0] == pytest.approx(0.4, abs=1e-12)
    assert np.allclose(d[1:-1, 0], 2 * t[1:-1], atol=1e-12)


def test_estimate_derivatives_constant_zero():
    grid = TimeGrid(0.0, 0.1, 5)
    traj = Trajectory(grid, np.ones((6, 2)))
    assert np.array_equal(estimate_derivatives(traj), np.zeros((6, 2)))


def test_estimate_derivatives_linear_endpoint():
    grid = TimeGrid(0.0, 0.1, 5)
    t = grid.times()
    traj = Trajectory(grid, t[:, None])
    d = estimate_derivatives(traj)
    assert d[0, 0] == pytest.approx(1.0, abs=1e-12)
    assert d[-1, 0] == pytest.approx(1.0, abs=1e-12)


def test_estimate_derivatives_too_short():
    grid = TimeGrid(0.0, 0.1, 1)
    with pytest.raises(TooShortError):
        estimate_derivatives(Trajectory(grid, np.zeros((2, 1))))


def test_timegrid_validation():
    with pytest.raises(ValueError):
        TimeGrid(0.0, -0.1, 5)
    with pytest.raises(ValueError):
        TimeGrid(0.0, 0.1, -1)
    assert np.allclose(TimeGrid(1.0, 0.5, 4).times(), [1.0, 1.5, 2.0, 2.5, 3.0])


def test_trajectory_row_count_checked():
    with pytest.raises(ValueError):
        Trajectory(TimeGrid(0.0, 0.1, 5), np.zeros((3, 2)))


def test_moving_average_preserves_constant():
    x = np.ones((7, 2)) * 4.0
    assert np.allclose(moving_average(x, 3), x)


def test_moving_average_window_validation():
    with pytest.raises(ValueError):
        moving_average(np.ones((5, 1)), 2)
