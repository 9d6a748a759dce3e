"""Test-time adaptation of per-task weights on a trajectory prefix.

Structure gates and global basis parameters stay frozen; only the linear
task coefficients move. Adaptation runs in two stages:

1. warm start: closed-form least squares of finite-difference derivative
   targets against the gated basis columns, and
2. refinement: gradient descent on the trajectory reconstruction loss
   (mean squared distance between the rollout from the first observation
   and the observed prefix), with gradients obtained by differentiating
   through the unrolled fixed-step RK4 integrator. Steps are accepted only
   if they reduce the loss; the per-task step size is halved on rejection
   (at most 20 halvings per step), so refinement can never end worse than
   the warm start.

Everything here is batched over tasks; `adapt` is the single-task wrapper.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import basis
from .model import MetaModel, fit_weights_lsq, rollout
from .ode_sim import (
    Diverged,
    DivergenceGuard,
    TimeGrid,
    Trajectory,
    VectorField,
    integrate_batch,
)
from .trainer import derivative_targets


class ZeroVarianceError(ValueError):
    """NRMSE is undefined when the ground truth is constant."""


@dataclass(frozen=True)
class AdaptConfig:
    steps: int = 1000
    eta: float = 1e-2
    warm_start: str = "derivative_fit"  # or "zeros"
    refine_with_rollout: bool = True
    rollout_unroll_horizon: int | None = None  # truncate the refinement window
    ridge: float = 1e-8
    n_sub: int = 10
    max_norm: float = 1e8
    max_halvings: int = 20

    def __post_init__(self):
        if self.steps < 0:
            raise ValueError("steps must be >= 0")
        if self.warm_start not in ("derivative_fit", "zeros"):
            raise ValueError(f"unknown warm_start {self.warm_start!r}")


def _batched_model_field(model: MetaModel, w_eff: np.ndarray) -> VectorField:
    """Field where batch row b uses effective coefficient matrix w_eff[b]."""
    lib, xi = model.lib, model.xi

    def f(x):
        feats = basis.eval_library(lib, xi, x)
        return np.einsum("bm,bdm->bd", feats, w_eff)

    return VectorField(dim=model.d, func=f)


def _effective(w_act, act_rows, act_cols, n_b, d, m):
    w_eff = np.zeros((n_b, d, m))
    w_eff[:, act_rows, act_cols] = w_act
    return w_eff


def _prefix_loss(
    model: MetaModel,
    w_eff: np.ndarray,
    prefix_states: np.ndarray,
    dt: float,
    n_steps: int,
    cfg: AdaptConfig,
) -> np.ndarray:
    """Reconstruction loss per task; inf where the rollout leaves the guard."""
    states, last_valid = integrate_batch(
        _batched_model_field(model, w_eff),
        prefix_states[:, 0],
        TimeGrid(0.0, dt, n_steps),
        guard=DivergenceGuard(cfg.max_norm),
        n_sub=cfg.n_sub,
    )
    err = states - prefix_states[:, : n_steps + 1]
    loss = np.einsum("btd,btd->b", err, err) / (n_steps + 1)
    loss[last_valid < n_steps] = np.inf
    return loss


def _loss_and_grad(
    model: MetaModel,
    w_act: np.ndarray,  # (B, P) active coefficients
    act_rows: np.ndarray,
    act_cols: np.ndarray,
    prefix_states: np.ndarray,
    dt: float,
    n_steps: int,
    cfg: AdaptConfig,
):
    """Exact gradient of the reconstruction loss through the unrolled RK4 map.

    Forward sensitivity: S = d(state)/d(active weights), shape (B, d, P),
    propagated through every stage of every substep alongside the state.
    """
    lib, xi = model.lib, model.xi
    n_b, _, d = prefix_states.shape
    n_p = act_rows.size
    w_eff = _effective(w_act, act_rows, act_cols, n_b, d, model.m)
    h = dt / cfg.n_sub
    x = prefix_states[:, 0].copy()
    sens = np.zeros((n_b, d, n_p))
    loss = np.zeros(n_b)
    grad = np.zeros((n_b, n_p))
    alive = np.ones(n_b, dtype=bool)
    p_idx = np.arange(n_p)

    def stage(xs, ss):
        feats = basis.eval_library(lib, xi, xs)
        k = np.einsum("bm,bdm->bd", feats, w_eff)
        gx = basis.grad_x(lib, xi, xs)
        jx = np.einsum("bdm,bme->bde", w_eff, gx)
        dk = np.einsum("bde,bep->bdp", jx, ss)
        dk[:, act_rows, p_idx] += feats[:, act_cols]
        return k, dk

    with np.errstate(over="ignore", invalid="ignore"):
        for l in range(1, n_steps + 1):
            for _ in range(cfg.n_sub):
                k1, d1 = stage(x, sens)
                k2, d2 = stage(x + 0.5 * h * k1, sens + 0.5 * h * d1)
                k3, d3 = stage(x + 0.5 * h * k2, sens + 0.5 * h * d2)
                k4, d4 = stage(x + h * k3, sens + h * d3)
                x = x + (h / 6.0) * (k1 + 2 * k2 + 2 * k3 + k4)
                sens = sens + (h / 6.0) * (d1 + 2 * d2 + 2 * d3 + d4)
            bad = ~(np.all(np.isfinite(x), axis=1) & (np.max(np.abs(x), axis=1) <= cfg.max_norm))
            if bad.any():
                alive &= ~bad
                x[bad] = 0.0  # keep arithmetic finite; results discarded below
                sens[bad] = 0.0
            err = x - prefix_states[:, l]
            loss += np.einsum("bd,bd->b", err, err)
            grad += np.einsum("bdp,bd->bp", sens, err)
    loss = loss / (n_steps + 1)
    grad = grad * (2.0 / (n_steps + 1))
    loss[~alive] = np.inf
    grad[~alive] = 0.0
    return loss, grad


def adapt_batch(
    model: MetaModel,
    prefix_states: np.ndarray,
    dt: float,
    cfg: AdaptConfig | None = None,
) -> tuple[np.ndarray, dict]:
    """Adapt task weights for a batch of prefixes of shape (B, P+1, d).

    Returns (weights (B, d, m), info). info['refine_fallback'] marks tasks
    whose refinement rollout diverged at the warm start and therefore kept
    their stage-1 weights.
    """
    if cfg is None:
        cfg = AdaptConfig()
    prefix_states = np.asarray(prefix_states, dtype=float)
    n_b, n_pts, d = prefix_states.shape
    g = model.gates()
    act_rows, act_cols = np.nonzero(g)
    n_p = act_rows.size

    w = np.zeros((n_b, d, model.m))
    if cfg.warm_start == "derivative_fit" and n_p > 0 and n_pts >= 3:
        for b in range(n_b):
            targets = derivative_targets(prefix_states[b], dt)
            w[b] = fit_weights_lsq(model, prefix_states[b], targets, ridge=cfg.ridge)

    info = {"refine_fallback": np.zeros(n_b, dtype=bool), "refine_steps": 0}
    if not cfg.refine_with_rollout or cfg.steps == 0 or n_p == 0:
        return w, info

    horizon = n_pts - 1
    if cfg.rollout_unroll_horizon is not None:
        horizon = min(horizon, cfg.rollout_unroll_horizon)
    if horizon < 1:
        return w, info

    w_act = w[:, act_rows, act_cols]
    loss = _prefix_loss(
        model, _effective(w_act, act_rows, act_cols, n_b, d, model.m),
        prefix_states, dt, horizon, cfg,
    )
    diverged_start = ~np.isfinite(loss)
    info["refine_fallback"] = diverged_start.copy()
    active = ~diverged_start
    lr = np.full(n_b, cfg.eta)

    for step in range(cfg.steps):
        if not active.any():
            break
        idx = np.where(active)[0]
        _, grad = _loss_and_grad(
            model, w_act[idx], act_rows, act_cols, prefix_states[idx], dt, horizon, cfg
        )
        pending = idx
        g_pend = grad
        improved = np.zeros(n_b, dtype=bool)
        for halving in range(cfg.max_halvings + 1):
            trial = w_act[pending] - lr[pending, None] * g_pend
            trial_loss = _prefix_loss(
                model,
                _effective(trial, act_rows, act_cols, pending.size, d, model.m),
                prefix_states[pending], dt, horizon, cfg,
            )
            better = trial_loss < loss[pending]
            if better.any():
                acc = pending[better]
                w_act[acc] = trial[better]
                loss[acc] = trial_loss[better]
                improved[acc] = True
                if halving == 0:
                    # Reward a first-try acceptance so the step size can
                    # recover after earlier backtracking.
                    lr[acc] = np.minimum(lr[acc] * 2.0, cfg.eta)
            pending = pending[~better]
            g_pend = g_pend[~better]
            if pending.size == 0:
                break
            lr[pending] *= 0.5
        # A full backtracking pass without improvement means converged.
        active &= improved
        info["refine_steps"] = step + 1

    w[:, act_rows, act_cols] = w_act
    return w, info


def adapt(model: MetaModel, prefix: Trajectory, cfg: AdaptConfig | None = None) -> np.ndarray:
    """Adapt weights for one test task from its observed prefix."""
    if prefix.n_points < 3:
        raise ValueError("prefix must have at least 3 points")
    w, _ = adapt_batch(model, prefix.states[None], prefix.grid.dt, cfg)
    return w[0]


def forecast(
    model: MetaModel,
    w: np.ndarray,
    prefix: Trajectory,
    horizon_grid: TimeGrid,
    guard: DivergenceGuard | None = None,
    n_sub: int = 10,
) -> Trajectory | Diverged:
    """Roll the adapted model out from the last observed state.

    The returned trajectory includes the seed state as its first row; with a
    zero-step horizon it is exactly the seed state.
    """
    if horizon_grid.n_steps == 0:
        return Trajectory(horizon_grid, prefix.states[-1:].copy())
    return rollout(model, w, prefix.states[-1], horizon_grid, guard=guard, n_sub=n_sub)


def forecast_batch(
    model: MetaModel,
    w: np.ndarray,
    seed_states: np.ndarray,
    horizon_grid: TimeGrid,
    guard: DivergenceGuard | None = None,
    n_sub: int = 10,
) -> tuple[np.ndarray, np.ndarray]:
    """Batched rollout; returns (states (B, H+1, d), completed mask)."""
    n_b = seed_states.shape[0]
    if horizon_grid.n_steps == 0:
        return seed_states[:, None, :].copy(), np.ones(n_b, dtype=bool)
    w_eff = np.asarray(w) * model.gates()
    states, last_valid = integrate_batch(
        _batched_model_field(model, w_eff), seed_states, horizon_grid,
        guard=guard, n_sub=n_sub,
    )
    return states, last_valid == horizon_grid.n_steps


def nrmse(pred, truth, pooling: str = "per_dim") -> float:
    """Root mean squared error normalized by the ground-truth spread.

    'per_dim' (default) standardizes each state dimension by its own
    population std before pooling, so heterogeneous scales contribute
    comparably; 'raw' divides the pooled RMSE by the pooled std.
    """
    p = pred.states if isinstance(pred, Trajectory) else np.asarray(pred, dtype=float)
    t = truth.states if isinstance(truth, Trajectory) else np.asarray(truth, dtype=float)
    if p.shape != t.shape:
        raise ValueError(f"shape mismatch {p.shape} vs {t.shape}")
    if pooling == "per_dim":
        sd = t.std(axis=0)
        if np.any(sd == 0):
            raise ZeroVarianceError("ground truth has a constant dimension")
        return float(np.sqrt(np.mean(((p - t) / sd) ** 2)))
    if pooling == "raw":
        sd = t.std()
        if sd == 0:
            raise ZeroVarianceError("ground truth is constant")
        return float(np.sqrt(np.mean((p - t) ** 2)) / sd)
    raise ValueError(f"unknown pooling {pooling!r}")
