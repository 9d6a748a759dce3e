"""Transductive sparse-regression baseline.

Fits each test prefix on its own: sequential thresholded least squares
(STLS) regresses finite-difference derivative targets on the dictionary
evaluated at the observed states, then the fitted linear ODE is rolled out.
The dictionary's sine parameters stay at their neutral initialization
(scale 1, phase 0); there is no mechanism here to learn them.

Per-task hyperparameters are chosen transductively as well: each candidate
(threshold, ridge) pair is scored by how well its fitted model reconstructs
the prefix trajectory it was fitted on, and the best reconstruction wins.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import basis
from .basis import BasisLibrary
from .ode_sim import (
    Diverged,
    DivergenceGuard,
    TimeGrid,
    Trajectory,
    VectorField,
    integrate,
    integrate_batch,
)
from .trainer import derivative_targets

# Candidate grids for the transductive per-task selection.
THRESHOLD_GRID = (0.005, 0.01, 0.05, 0.1, 0.2, 0.5)
RIDGE_GRID = (0.05, 0.01, 0.1, 0.5)


@dataclass(frozen=True)
class StlsConfig:
    threshold: float
    ridge: float
    max_iters: int = 20

    def __post_init__(self):
        if self.threshold < 0 or self.ridge < 0:
            raise ValueError("threshold and ridge must be non-negative")


def _solve(features: np.ndarray, target: np.ndarray, ridge: float) -> np.ndarray:
    if ridge == 0.0:
        return np.linalg.lstsq(features, target, rcond=None)[0]
    gram = features.T @ features + ridge * np.eye(features.shape[1])
    return np.linalg.solve(gram, features.T @ target)


def stls_fit(features: np.ndarray, targets: np.ndarray, cfg: StlsConfig) -> np.ndarray:
    """Sequential thresholded least squares; returns (d, m) coefficients.

    Per output column: ridge least squares on the active columns, zero out
    coefficients below the threshold, repeat until the active set is stable
    or max_iters passes. The active set only ever shrinks; it may become
    empty (zero model).
    """
    features = np.asarray(features, dtype=float)
    targets = np.asarray(targets, dtype=float)
    if targets.ndim == 1:
        targets = targets[:, None]
    n, m = features.shape
    d = targets.shape[1]
    coeffs = np.zeros((d, m))
    for j in range(d):
        active = np.arange(m)
        sol = np.zeros(0)
        for _ in range(cfg.max_iters):
            if active.size == 0:
                break
            sol = _solve(features[:, active], targets[:, j], cfg.ridge)
            keep = np.abs(sol) >= cfg.threshold
            if keep.all():
                break
            active = active[keep]
            sol = sol[keep]
        if active.size:
            coeffs[j, active] = sol
    return coeffs


def sindy_fit_prefix(
    prefix: Trajectory, lib: BasisLibrary, cfg: StlsConfig, xi: np.ndarray | None = None
) -> np.ndarray:
    """STLS coefficients for one prefix against its finite-difference targets."""
    if xi is None:
        xi = basis.default_xi(lib)
    feats = basis.eval_library(lib, xi, prefix.states)
    targets = derivative_targets(prefix.states, prefix.grid.dt)
    return stls_fit(feats, targets, cfg)


def _coeff_field(lib: BasisLibrary, xi: np.ndarray, coeffs: np.ndarray) -> VectorField:
    def f(x):
        return basis.eval_library(lib, xi, x) @ coeffs.T

    return VectorField(dim=lib.d, func=f)


def _batch_coeff_field(lib: BasisLibrary, xi: np.ndarray, coeffs: np.ndarray) -> VectorField:
    def f(x):
        return np.einsum("bm,bdm->bd", basis.eval_library(lib, xi, x), coeffs)

    return VectorField(dim=lib.d, func=f)


def sindy_forecast(
    prefix: Trajectory,
    horizon_grid: TimeGrid,
    lib: BasisLibrary,
    cfg: StlsConfig,
    guard: DivergenceGuard | None = None,
    n_sub: int = 10,
) -> Trajectory | Diverged:
    """Fit the prefix with one STLS config and roll out over the horizon."""
    xi = basis.default_xi(lib)
    coeffs = sindy_fit_prefix(prefix, lib, cfg, xi)
    if horizon_grid.n_steps == 0:
        return Trajectory(horizon_grid, prefix.states[-1:].copy())
    return integrate(
        _coeff_field(lib, xi, coeffs), prefix.states[-1], horizon_grid,
        guard=guard, n_sub=n_sub,
    )


def sindy_forecast_batch(
    prefix_states: np.ndarray,
    dt: float,
    horizon_steps: int,
    lib: BasisLibrary,
    thresholds=THRESHOLD_GRID,
    ridges=RIDGE_GRID,
    guard: DivergenceGuard | None = None,
    n_sub: int = 10,
) -> tuple[np.ndarray, np.ndarray]:
    """Per-task transductive selection plus forecast for a task batch.

    For every (threshold, ridge) candidate, fit each prefix and roll the
    fitted model back over the prefix window; the candidate with the lowest
    prefix reconstruction error wins for that task (divergence scores inf,
    grid order breaks ties). Returns (states (B, H+1, d), completed mask).
    """
    prefix_states = np.asarray(prefix_states, dtype=float)
    n_b, n_pts, d = prefix_states.shape
    xi = basis.default_xi(lib)
    prefix_grid = TimeGrid(0.0, dt, n_pts - 1)

    feats = basis.eval_library(lib, xi, prefix_states)  # (B, P+1, m)
    targets = np.stack([derivative_targets(prefix_states[b], dt) for b in range(n_b)])

    best_err = np.full(n_b, np.inf)
    best_coeffs = np.zeros((n_b, d, lib.m))
    for tau in thresholds:
        for alpha in ridges:
            cfg = StlsConfig(tau, alpha)
            coeffs = np.stack(
                [stls_fit(feats[b], targets[b], cfg) for b in range(n_b)]
            )
            recon, last_valid = integrate_batch(
                _batch_coeff_field(lib, xi, coeffs),
                prefix_states[:, 0], prefix_grid, guard=guard, n_sub=n_sub,
            )
            err = np.mean(np.sum((recon - prefix_states) ** 2, axis=2), axis=1)
            err[last_valid < prefix_grid.n_steps] = np.inf
            better = err < best_err
            best_err[better] = err[better]
            best_coeffs[better] = coeffs[better]

    if horizon_steps == 0:
        return prefix_states[:, -1:, :].copy(), np.ones(n_b, dtype=bool)
    horizon_grid = TimeGrid(0.0, dt, horizon_steps)
    states, last_valid = integrate_batch(
        _batch_coeff_field(lib, xi, best_coeffs),
        prefix_states[:, -1], horizon_grid, guard=guard, n_sub=n_sub,
    )
    ok = (last_valid == horizon_steps) & np.isfinite(best_err)
    return states, ok
