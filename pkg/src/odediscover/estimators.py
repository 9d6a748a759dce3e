"""Estimator-style front end: fit on a task family, predict from a prefix.

These classes follow the scikit-learn conventions (constructor stores
hyperparameters verbatim, ``fit`` returns ``self``, learned state lives in
trailing-underscore attributes, ``get_params``/``set_params`` enable
cloning and grid-search composition) while operating on trajectory tasks
rather than flat design matrices.
"""

from __future__ import annotations

import inspect

import numpy as np

from . import basis
from .adaptation import AdaptConfig, adapt, forecast, nrmse
from .model import extract_equation
from .ode_sim import Diverged, TimeGrid, Trajectory
from .sindy import StlsConfig, sindy_fit_prefix, sindy_forecast
from .systems import Dataset, split_prefix
from .trainer import HyperConfig, SweepGrid, fit, sweep_and_select
from .validation import check_positive_int, check_trajectory


class BaseEstimator:
    """Minimal parameter-introspection base compatible with sklearn.clone."""

    @classmethod
    def _param_names(cls):
        sig = inspect.signature(cls.__init__)
        return [p for p in sig.parameters if p != "self"]

    def get_params(self, deep: bool = True) -> dict:
        return {name: getattr(self, name) for name in self._param_names()}

    def set_params(self, **params):
        valid = set(self._param_names())
        for key, value in params.items():
            if key not in valid:
                raise ValueError(f"invalid parameter {key!r} for {type(self).__name__}")
            setattr(self, key, value)
        return self

    def __repr__(self):
        args = ", ".join(f"{k}={v!r}" for k, v in self.get_params().items())
        return f"{type(self).__name__}({args})"


class StructuredODERegressor(BaseEstimator):
    """Shared-structure ODE learner with per-task test-time adaptation.

    fit() learns binary structure gates, global basis parameters, and
    per-training-task coefficients from a Dataset of tasks; predict()
    adapts fresh coefficients on an observed prefix and forecasts the
    requested horizon.

    Parameters mirror the training HyperConfig; pass sweep=True to run the
    full hyperparameter grid with sparsity-aware selection instead of a
    single configuration.
    """

    def __init__(
        self,
        lambda_phi: float = 1e-3,
        lambda_rex: float = 0.0,
        eta: float = 1e-2,
        epochs: int = 2000,
        batch_tasks: int = 128,
        optimizer: str = "adam",
        sweep: bool = False,
        composed_library: bool = False,
        adapt_steps: int = 1000,
        adapt_eta: float = 1e-2,
        refine_with_rollout: bool = True,
        val_frac: float = 0.2,
        seed: int = 0,
        n_workers: int | None = None,
    ):
        self.lambda_phi = lambda_phi
        self.lambda_rex = lambda_rex
        self.eta = eta
        self.epochs = epochs
        self.batch_tasks = batch_tasks
        self.optimizer = optimizer
        self.sweep = sweep
        self.composed_library = composed_library
        self.adapt_steps = adapt_steps
        self.adapt_eta = adapt_eta
        self.refine_with_rollout = refine_with_rollout
        self.val_frac = val_frac
        self.seed = seed
        self.n_workers = n_workers

    def _lib_for(self, d: int):
        lib = basis.make_library(d)
        return basis.compose_layer2(lib) if self.composed_library else lib

    def fit(self, dataset: Dataset):
        if not isinstance(dataset, Dataset):
            raise TypeError("fit expects a Dataset of trajectory tasks")
        lib = self._lib_for(dataset.system.d)
        if self.sweep:
            self.model_, self.sweep_records_ = sweep_and_select(
                dataset, SweepGrid(epochs=self.epochs, batch_tasks=self.batch_tasks,
                                   optimizer=self.optimizer),
                seed=self.seed, val_frac=self.val_frac, lib=lib,
                n_workers=self.n_workers,
            )
        else:
            cfg = HyperConfig(
                lambda_phi=self.lambda_phi, lambda_rex=self.lambda_rex, eta=self.eta,
                epochs=self.epochs, batch_tasks=self.batch_tasks, optimizer=self.optimizer,
            )
            from .systems import split_validation

            train_tasks, val_tasks = split_validation(dataset, self.val_frac)
            self.model_, report = fit(
                train_tasks, cfg, seed=self.seed, val_tasks=val_tasks,
                val_prefix_len=dataset.prefix_len, lib=lib,
            )
            self.sweep_records_ = None
            self.train_report_ = report
        self.equation_ = extract_equation(
            self.model_, state_names=list(dataset.system.state_names)
        )
        return self

    def _check_fitted(self):
        if not hasattr(self, "model_"):
            raise RuntimeError("call fit() before using the estimator")

    def adapt_weights(self, prefix) -> np.ndarray:
        self._check_fitted()
        traj = check_trajectory(prefix, d=self.model_.d, min_rows=3)
        cfg = AdaptConfig(
            steps=self.adapt_steps, eta=self.adapt_eta,
            refine_with_rollout=self.refine_with_rollout,
        )
        return adapt(self.model_, traj, cfg)

    def predict(self, prefix, horizon_steps: int):
        """Forecast `horizon_steps` future points after the prefix.

        Returns an (horizon_steps, d) array, or None if the adapted model
        diverges over the horizon (the NaN* outcome).
        """
        self._check_fitted()
        traj = check_trajectory(prefix, d=self.model_.d, min_rows=3)
        horizon_steps = check_positive_int(horizon_steps, "horizon_steps")
        w = self.adapt_weights(traj)
        grid = TimeGrid(
            traj.grid.t0 + traj.grid.n_steps * traj.grid.dt, traj.grid.dt, horizon_steps
        )
        out = forecast(self.model_, w, traj, grid)
        if isinstance(out, Diverged):
            return None
        return out.states[1:]

    def score(self, dataset: Dataset) -> float:
        """Mean negative NRMSE over a test dataset (higher is better)."""
        self._check_fitted()
        vals = []
        for task in dataset.tasks:
            obs, held = split_prefix(task, dataset.prefix_len)
            pred = self.predict(obs, held.states.shape[0])
            if pred is None:
                continue
            vals.append(nrmse(pred, held.states))
        if not vals:
            return float("-inf")
        return -float(np.mean(vals))


class SINDyRegressor(BaseEstimator):
    """Transductive sparse-regression baseline over the same dictionary.

    Fits one trajectory prefix at a time by sequential thresholded least
    squares; no knowledge is shared across tasks.
    """

    def __init__(self, threshold: float = 0.1, ridge: float = 0.05, max_iters: int = 20):
        self.threshold = threshold
        self.ridge = ridge
        self.max_iters = max_iters

    def fit(self, prefix):
        traj = check_trajectory(prefix, min_rows=3)
        self.lib_ = basis.make_library(traj.d)
        self.prefix_ = traj
        self.coef_ = sindy_fit_prefix(
            traj, self.lib_, StlsConfig(self.threshold, self.ridge, self.max_iters)
        )
        return self

    def predict(self, horizon_steps: int):
        if not hasattr(self, "coef_"):
            raise RuntimeError("call fit() before predict()")
        horizon_steps = check_positive_int(horizon_steps, "horizon_steps")
        traj = self.prefix_
        grid = TimeGrid(
            traj.grid.t0 + traj.grid.n_steps * traj.grid.dt, traj.grid.dt, horizon_steps
        )
        out = sindy_forecast(
            traj, grid, self.lib_, StlsConfig(self.threshold, self.ridge, self.max_iters)
        )
        if isinstance(out, Diverged):
            return None
        return out.states[1:]
