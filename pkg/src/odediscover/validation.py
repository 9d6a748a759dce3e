"""Input validation helpers shared by the estimator API and the CLI."""

from __future__ import annotations

import numpy as np

from .ode_sim import TimeGrid, Trajectory


def check_states_matrix(x, d: int | None = None, min_rows: int = 1, name: str = "states") -> np.ndarray:
    """Coerce to a finite float (n, d) matrix."""
    arr = np.asarray(x, dtype=float)
    if arr.ndim == 1:
        arr = arr[:, None]
    if arr.ndim != 2:
        raise ValueError(f"{name} must be 2-d, got shape {arr.shape}")
    if arr.shape[0] < min_rows:
        raise ValueError(f"{name} needs at least {min_rows} rows, got {arr.shape[0]}")
    if d is not None and arr.shape[1] != d:
        raise ValueError(f"{name} must have {d} columns, got {arr.shape[1]}")
    if not np.all(np.isfinite(arr)):
        raise ValueError(f"{name} contains non-finite values")
    return arr


def check_trajectory(traj, d: int | None = None, min_rows: int = 1) -> Trajectory:
    """Accept a Trajectory or an (states, dt) pair; validate dimensions."""
    if isinstance(traj, Trajectory):
        check_states_matrix(traj.states, d=d, min_rows=min_rows, name="trajectory states")
        return traj
    try:
        states, dt = traj
    except Exception as exc:
        raise TypeError(
            "expected a Trajectory or an (states, dt) pair"
        ) from exc
    states = check_states_matrix(states, d=d, min_rows=min_rows)
    grid = TimeGrid(0.0, float(dt), states.shape[0] - 1)
    return Trajectory(grid, states)


def check_positive_int(value, name: str) -> int:
    iv = int(value)
    if iv < 1:
        raise ValueError(f"{name} must be a positive integer, got {value}")
    return iv
