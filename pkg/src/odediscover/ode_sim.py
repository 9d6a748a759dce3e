"""Fixed-step numerical integration of vector fields with divergence detection.

All integrators operate on plain numpy arrays and accept batched states
(leading axes are preserved), so the same code path simulates one trajectory
or a thousand tasks at once. A rollout either returns a fully finite
:class:`Trajectory` or a :class:`Diverged` marker; non-finite states are
never handed back to callers.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable

import numpy as np


class NonFiniteError(ValueError):
    """A numerical stage produced NaN or infinity where finiteness is required."""


class TooShortError(ValueError):
    """Operation needs more samples than the trajectory provides."""


@dataclass(frozen=True)
class TimeGrid:
    """Regularly spaced observation times t_l = t0 + l*dt, l = 0..n_steps.

    n_steps = 0 is allowed as a degenerate single-point grid so a forecast
    over an empty horizon can still be represented as a Trajectory.
    """

    t0: float
    dt: float
    n_steps: int

    def __post_init__(self):
        if not self.dt > 0:
            raise ValueError(f"dt must be positive, got {self.dt}")
        if self.n_steps < 0:
            raise ValueError(f"n_steps must be >= 0, got {self.n_steps}")

    @property
    def n_points(self) -> int:
        return self.n_steps + 1

    def times(self) -> np.ndarray:
        return self.t0 + self.dt * np.arange(self.n_points)

    def shifted(self, start_index: int, n_steps: int) -> "TimeGrid":
        """Sub-grid starting at point `start_index` of this grid."""
        return TimeGrid(self.t0 + start_index * self.dt, self.dt, n_steps)


@dataclass(frozen=True)
class Trajectory:
    """A time grid plus the (n_steps+1, d) matrix of states observed on it."""

    grid: TimeGrid
    states: np.ndarray

    def __post_init__(self):
        states = np.asarray(self.states, dtype=float)
        object.__setattr__(self, "states", states)
        if states.ndim != 2:
            raise ValueError(f"states must be 2-d, got shape {states.shape}")
        if states.shape[0] != self.grid.n_points:
            raise ValueError(
                f"states has {states.shape[0]} rows, grid has {self.grid.n_points} points"
            )

    @property
    def d(self) -> int:
        return self.states.shape[1]

    @property
    def n_points(self) -> int:
        return self.states.shape[0]


@dataclass(frozen=True)
class VectorField:
    """A vector field x -> dx/dt of fixed dimension.

    `func` must accept arrays of shape (..., dim) and return the same shape,
    so rollouts can be batched over tasks.
    """

    dim: int
    func: Callable[[np.ndarray], np.ndarray]

    def __call__(self, x: np.ndarray) -> np.ndarray:
        return self.func(x)


@dataclass(frozen=True)
class DivergenceGuard:
    """Abort threshold for rollouts; max_norm bounds the max-abs state entry."""

    max_norm: float = 1e8


@dataclass(frozen=True)
class Diverged:
    """Marker returned when a rollout left the guarded region.

    `last_valid_index` is the last grid index whose state was finite and in
    bounds; `partial_states` holds rows 0..last_valid_index.
    """

    last_valid_index: int
    partial_states: np.ndarray
    grid: TimeGrid


def rk4_step(field: VectorField, x: np.ndarray, h: float) -> np.ndarray:
    """One classical 4th-order Runge-Kutta step of size h.

    Raises NonFiniteError if the input, any stage, or the output is non-finite.
    """
    if not h > 0:
        raise ValueError(f"step size must be positive, got {h}")
    x = np.asarray(x, dtype=float)
    if not np.all(np.isfinite(x)):
        raise NonFiniteError("rk4_step called with non-finite state")
    with np.errstate(over="ignore", invalid="ignore"):
        k1 = field(x)
        k2 = field(x + 0.5 * h * k1)
        k3 = field(x + 0.5 * h * k2)
        k4 = field(x + h * k3)
        out = x + (h / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)
    if not np.all(np.isfinite(out)):
        raise NonFiniteError("rk4_step produced a non-finite state")
    return out


def _rk4_step_unchecked(field, x, h):
    # Hot path for integrate_batch: finiteness is handled by the caller's guard.
    k1 = field(x)
    k2 = field(x + 0.5 * h * k1)
    k3 = field(x + 0.5 * h * k2)
    k4 = field(x + h * k3)
    return x + (h / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)


def integrate_batch(
    field: VectorField,
    x0: np.ndarray,
    grid: TimeGrid,
    guard: DivergenceGuard | None = None,
    n_sub: int = 10,
) -> tuple[np.ndarray, np.ndarray]:
    """Roll out a batch of initial states over `grid` with RK4 substepping.

    x0 has shape (B, d). Returns (states, last_valid) where states is
    (B, n_steps+1, d) and last_valid[b] is the last grid index at which task
    b was still finite and inside the guard. Rows beyond last_valid hold the
    frozen last valid state (callers must consult last_valid; the returned
    array is always finite).
    """
    if guard is None:
        guard = DivergenceGuard()
    x0 = np.atleast_2d(np.asarray(x0, dtype=float))
    if not np.all(np.isfinite(x0)):
        raise NonFiniteError("integrate called with non-finite initial state")
    n_b, d = x0.shape
    if d != field.dim:
        raise ValueError(f"x0 dimension {d} does not match field dimension {field.dim}")
    h = grid.dt / n_sub
    states = np.empty((n_b, grid.n_points, d))
    states[:, 0] = x0
    last_valid = np.full(n_b, grid.n_steps, dtype=int)
    alive = np.ones(n_b, dtype=bool)
    x = x0.copy()
    with np.errstate(over="ignore", invalid="ignore", divide="ignore"):
        for l in range(grid.n_steps):
            if alive.any():
                idx = np.where(alive)[0]
                xa = x[idx]
                ok = np.ones(len(idx), dtype=bool)
                for _ in range(n_sub):
                    xa[ok] = _rk4_step_unchecked(field, xa[ok], h)
                    bad = ~(
                        np.all(np.isfinite(xa), axis=1)
                        & (np.max(np.abs(xa), axis=1) <= guard.max_norm)
                    )
                    if bad.any():
                        newly = ok & bad
                        last_valid[idx[newly]] = l
                        alive[idx[newly]] = False
                        ok &= ~bad
                        if not ok.any():
                            break
                x[idx[ok]] = xa[ok]
            states[:, l + 1] = x
    # Freeze dead tasks at their last valid state for all later rows.
    for b in np.where(last_valid < grid.n_steps)[0]:
        states[b, last_valid[b] + 1 :] = states[b, last_valid[b]]
    return states, last_valid


def integrate(
    field: VectorField,
    x0: np.ndarray,
    grid: TimeGrid,
    guard: DivergenceGuard | None = None,
    n_sub: int = 10,
) -> Trajectory | Diverged:
    """Roll out a single initial state; see integrate_batch for semantics."""
    x0 = np.asarray(x0, dtype=float).reshape(-1)
    states, last_valid = integrate_batch(field, x0[None, :], grid, guard=guard, n_sub=n_sub)
    if last_valid[0] < grid.n_steps:
        lv = int(last_valid[0])
        return Diverged(lv, states[0, : lv + 1].copy(), grid)
    return Trajectory(grid, states[0])


# Fehlberg 4(5) tableau; the 4th-order solution is propagated and the
# difference to the 5th-order one drives the step-size control.
_RKF45_C = np.array([0.0, 1 / 4, 3 / 8, 12 / 13, 1.0, 1 / 2])
_RKF45_A = [
    [],
    [1 / 4],
    [3 / 32, 9 / 32],
    [1932 / 2197, -7200 / 2197, 7296 / 2197],
    [439 / 216, -8.0, 3680 / 513, -845 / 4104],
    [-8 / 27, 2.0, -3544 / 2565, 1859 / 4104, -11 / 40],
]
_RKF45_B4 = np.array([25 / 216, 0.0, 1408 / 2565, 2197 / 4104, -1 / 5, 0.0])
_RKF45_B5 = np.array([16 / 135, 0.0, 6656 / 12825, 28561 / 56430, -9 / 50, 2 / 55])


def rkf45_integrate(
    field: VectorField,
    x0: np.ndarray,
    grid: TimeGrid,
    rtol: float = 1e-8,
    atol: float = 1e-10,
    guard: DivergenceGuard | None = None,
    max_steps: int = 1_000_000,
) -> Trajectory | Diverged:
    """Adaptive Runge-Kutta-Fehlberg 4(5) rollout sampled at the grid times.

    Cross-check integrator for the fixed-step RK4 path; single trajectory only.
    """
    if guard is None:
        guard = DivergenceGuard()
    x = np.asarray(x0, dtype=float).reshape(-1)
    if not np.all(np.isfinite(x)):
        raise NonFiniteError("rkf45 called with non-finite initial state")
    states = np.empty((grid.n_points, x.size))
    states[0] = x
    times = grid.times()
    h = grid.dt / 4.0
    n_evals = 0
    with np.errstate(over="ignore", invalid="ignore", divide="ignore"):
        for l in range(grid.n_steps):
            t, t_end = times[l], times[l + 1]
            while t < t_end - 1e-12 * grid.dt:
                h = min(h, t_end - t)
                k = np.empty((6, x.size))
                for s in range(6):
                    xs = x + h * sum(a * k[i] for i, a in enumerate(_RKF45_A[s]))
                    k[s] = field(xs)
                x4 = x + h * (_RKF45_B4 @ k)
                x5 = x + h * (_RKF45_B5 @ k)
                n_evals += 1
                if n_evals > max_steps:
                    return Diverged(l, states[: l + 1].copy(), grid)
                if not np.all(np.isfinite(x4)) or np.max(np.abs(x4)) > guard.max_norm:
                    return Diverged(l, states[: l + 1].copy(), grid)
                err = np.max(np.abs(x5 - x4) / (atol + rtol * np.maximum(np.abs(x), np.abs(x4))))
                if err <= 1.0:
                    t += h
                    x = x4
                # Standard 4th-order controller with safety factor.
                h *= min(4.0, max(0.1, 0.9 * (1.0 / max(err, 1e-16)) ** 0.2))
            states[l + 1] = x
    return Trajectory(grid, states)


def estimate_derivatives(traj: Trajectory) -> np.ndarray:
    """Finite-difference time derivatives of the observed states.

    Central differences at interior points, first-order one-sided at the two
    endpoints. Exact for polynomials of degree <= 2 at interior points.
    """
    x = traj.states
    if x.shape[0] < 3:
        raise TooShortError("need at least 3 samples to estimate derivatives")
    dt = traj.grid.dt
    out = np.empty_like(x)
    out[1:-1] = (x[2:] - x[:-2]) / (2.0 * dt)
    out[0] = (x[1] - x[0]) / dt
    out[-1] = (x[-1] - x[-2]) / dt
    return out


def moving_average(states: np.ndarray, window: int = 3) -> np.ndarray:
    """Centered moving-average smoother; the window shrinks at the ends.

    Optional pre-smoother for noisy observations before differencing.
    """
    if window < 1 or window % 2 == 0:
        raise ValueError("window must be a positive odd integer")
    half = window // 2
    n = states.shape[0]
    out = np.empty_like(np.asarray(states, dtype=float))
    for i in range(n):
        lo, hi = max(0, i - half), min(n, i + half + 1)
        out[i] = states[lo:hi].mean(axis=0)
    return out
