"""Joint training of gate logits, global basis parameters, and task weights.

The objective per minibatch of tasks is

    mean_i risk_i  +  lambda_phi * ||gates||_1  +  lambda_rex * Var_i(risk_i)

where risk_i is the derivative-matching error of task i: the mean over time
of the squared difference between predicted derivatives at the observed
states and finite-difference derivative targets. Gates are binary in the
forward pass; their logits receive straight-through gradients (the gate is
treated as sigmoid(logit) for differentiation only). The l1 subgradient is
routed the same way, so every logit feels a constant closing pressure of
lambda_phi * sigmoid'(logit).

All gradients are analytic; see tests for the finite-difference oracles.
"""

from __future__ import annotations

import os
import time
from dataclasses import dataclass

import numpy as np

from . import basis
from .basis import BasisLibrary
from .model import MetaModel, count_open_gates, fit_weights_lsq, gates
from .ode_sim import TimeGrid, Trajectory, estimate_derivatives, moving_average
from .systems import Dataset, TaskRecord, split_prefix, split_validation


class FailedConfigError(RuntimeError):
    """Training produced a non-finite loss; the config is reported, not fatal."""


class AllConfigsFailedError(RuntimeError):
    """Every config in a sweep failed."""


@dataclass(frozen=True)
class HyperConfig:
    lambda_phi: float
    lambda_rex: float
    eta: float
    epochs: int = 2000
    batch_tasks: int = 128
    optimizer: str = "adam"
    l1_on_sigmoid: bool = False  # penalize sigmoid(logits) instead of binary gates
    vrex_full_dataset: bool = False  # variance over all tasks once per epoch
    smooth_targets: bool = False  # window-3 moving average before differencing
    logit_init: float = 2.0  # open start; high enough that weights mature first
    xi_rate_scale: float = 0.1  # basis parameters move slower than weights
    polish_steps: int = 300  # structure-frozen continuous polish at the end

    def __post_init__(self):
        if self.lambda_phi < 0 or self.lambda_rex < 0 or self.eta < 0:
            raise ValueError("hyperparameters must be non-negative")
        if self.epochs < 1:
            raise ValueError("epochs must be >= 1")
        if self.optimizer not in ("adam", "sgd"):
            raise ValueError(f"unknown optimizer {self.optimizer!r}")

    def key(self) -> tuple:
        return (self.lambda_phi, self.lambda_rex, self.eta)


@dataclass(frozen=True)
class SweepGrid:
    lambda_phis: tuple[float, ...] = (1e-4, 1e-3, 5e-3, 1e-2)
    lambda_rexs: tuple[float, ...] = (0.0, 1e-3, 1e-2)
    etas: tuple[float, ...] = (1e-2, 1e-3, 1e-4)
    epochs: int = 2000
    batch_tasks: int = 128
    optimizer: str = "adam"
    smooth_targets: bool = False

    def configs(self) -> list[HyperConfig]:
        """Cross product in lexicographic order (the tie-break order)."""
        if not (self.lambda_phis and self.lambda_rexs and self.etas):
            raise ValueError("sweep grid must be non-empty")
        return [
            HyperConfig(
                lambda_phi=lp,
                lambda_rex=lr,
                eta=eta,
                epochs=self.epochs,
                batch_tasks=self.batch_tasks,
                optimizer=self.optimizer,
                smooth_targets=self.smooth_targets,
            )
            for lp in self.lambda_phis
            for lr in self.lambda_rexs
            for eta in self.etas
        ]


@dataclass(frozen=True)
class TaskRisk:
    task_id: int
    value: float


@dataclass
class TrainReport:
    loss: np.ndarray  # per-epoch means
    mean_risk: np.ndarray
    l1_term: np.ndarray
    vrex_term: np.ndarray
    val_loss: float | None = None
    phi_l0: int = 0
    wall_time: float = 0.0


def _sigmoid(z):
    out = np.empty_like(z)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out


def _sigmoid_prime(z):
    s = _sigmoid(z)
    return s * (1.0 - s)


def derivative_targets(traj_states: np.ndarray, dt: float, smooth: bool = False) -> np.ndarray:
    """Finite-difference targets for one task's observation matrix."""
    states = moving_average(traj_states, 3) if smooth else traj_states
    grid = TimeGrid(0.0, dt, states.shape[0] - 1)
    return estimate_derivatives(Trajectory(grid, states))


def task_risk(model: MetaModel, w: np.ndarray, task: TaskRecord) -> TaskRisk:
    """Derivative-matching risk of one task under weights w."""
    targets = derivative_targets(task.trajectory.states, task.trajectory.grid.dt)
    feats = basis.eval_library(model.lib, model.xi, task.trajectory.states)
    pred = feats @ (np.asarray(w) * model.gates()).T
    value = float(np.mean(np.sum((pred - targets) ** 2, axis=1)))
    if not np.isfinite(value):
        raise FailedConfigError(f"non-finite risk for task {task.task_id}")
    return TaskRisk(task.task_id, value)


def vrex_penalty(risks: list[TaskRisk] | np.ndarray) -> float:
    """Population variance (divide by M) of the per-task risk values."""
    values = np.asarray([r.value for r in risks] if risks and isinstance(risks[0], TaskRisk) else risks, dtype=float)
    if values.size == 0:
        raise ValueError("need at least one risk")
    return float(np.mean((values - values.mean()) ** 2))


class _FeatureEngine:
    """Caches xi-independent basis columns over the whole task stack.

    For the base library only the per-coordinate sine columns depend on xi,
    so each step refreshes d columns of the cached (M, T, m) feature block.
    Composed libraries fall back to full re-evaluation per minibatch.
    """

    def __init__(self, lib: BasisLibrary, states: np.ndarray):
        self.lib = lib
        self.states = states  # (M, T, d)
        self.generic = lib.composed
        if self.generic:
            self.feats = None
            return
        self.feats = np.empty(states.shape[:2] + (lib.m,))
        self.sine_cols: list[tuple[int, int, int]] = []  # (column, coord, slot)
        for k, f in enumerate(lib.functions):
            if f.kind == basis.SINE:
                self.sine_cols.append((k, f.j, f.xi_offset))
            else:
                self.feats[..., k] = basis._eval_one(f, np.zeros(lib.n_xi), states, self.feats)

    def features(self, xi: np.ndarray, idx: np.ndarray):
        """Return (F, aux) for the tasks in idx; aux feeds xi_grad."""
        xb = self.states[idx]
        if self.generic:
            fb = basis.eval_library(self.lib, xi, xb)
            return fb, (xb, fb)
        fb = self.feats[idx]
        aux = []
        for k, j, slot in self.sine_cols:
            arg = xi[slot] * xb[..., j] + xi[slot + 1]
            fb[..., k] = np.sin(arg)
            aux.append((k, slot, xb[..., j], np.cos(arg)))
        return fb, aux

    def features_all(self, xi: np.ndarray):
        """Refresh the whole cached block in place and return (view, aux)."""
        if self.generic:
            fb = basis.eval_library(self.lib, xi, self.states)
            return fb, (self.states, fb)
        aux = []
        for k, j, slot in self.sine_cols:
            arg = xi[slot] * self.states[..., j] + xi[slot + 1]
            self.feats[..., k] = np.sin(arg)
            aux.append((k, slot, self.states[..., j], np.cos(arg)))
        return self.feats, aux

    def xi_grad(self, xi: np.ndarray, q: np.ndarray, aux) -> np.ndarray:
        """Accumulate sum q[..., k] * dF_k/dxi using the cached per-call aux."""
        if self.generic:
            xb, fb = aux
            return _vjp_xi_with_cols(self.lib, xi, xb, q, fb)
        g = np.zeros(self.lib.n_xi)
        for k, slot, xj, cos_arg in aux:
            qk = q[..., k]
            g[slot] = np.sum(qk * xj * cos_arg)
            g[slot + 1] = np.sum(qk * cos_arg)
        return g


def _vjp_xi_with_cols(lib, xi, x, q, cols):
    g = np.zeros(lib.n_xi)
    memo: dict = {}
    for k in range(lib.m):
        for slot, part in basis._xi_partials(lib, xi, x, cols, k, memo):
            g[slot] += float(np.sum(q[..., k] * part))
    return g


def _minibatch_loss_and_grads(
    feats: np.ndarray,  # (B, T, m)
    targets: np.ndarray,  # (B, T, d)
    w_batch: np.ndarray,  # (B, d, m)
    logits: np.ndarray,  # (d, m)
    cfg: HyperConfig,
    gate_override: np.ndarray | None = None,
):
    """Loss pieces and analytic gradients for one minibatch of tasks.

    Returns (pieces, grad_w, grad_phi, q, risks) where grad_phi is the
    gradient with respect to the gate matrix before the straight-through
    sigmoid' factor, and q = dLoss/dF feeds the xi chain rule.
    """
    n_b, n_t, _ = feats.shape
    g = gates(logits) if gate_override is None else gate_override
    w_eff = w_batch * g
    pred = np.einsum("btm,bdm->btd", feats, w_eff)
    err = pred - targets
    risks = np.einsum("btd,btd->b", err, err) / n_t
    mean_risk = risks.mean()
    vrex = float(np.mean((risks - mean_risk) ** 2))
    if cfg.l1_on_sigmoid and gate_override is None:
        l1 = float(_sigmoid(logits).sum())
    else:
        l1 = float(np.abs(g).sum())
    loss = float(mean_risk + cfg.lambda_phi * l1 + cfg.lambda_rex * vrex)

    # dLoss/drisk_i, combining the mean and the variance penalty.
    c = (1.0 + 2.0 * cfg.lambda_rex * (risks - mean_risk)) / n_b
    err_c = err * (2.0 / n_t) * c[:, None, None]
    d_weff = np.einsum("btd,btm->bdm", err_c, feats)
    grad_w = d_weff * g
    grad_phi = np.einsum("bdm,bdm->dm", d_weff, w_batch) + cfg.lambda_phi
    q = np.einsum("btd,bdm->btm", err_c, w_eff)
    pieces = {"loss": loss, "mean_risk": float(mean_risk), "l1": l1, "vrex": vrex}
    return pieces, grad_w, grad_phi, q, risks


def total_loss(
    model: MetaModel,
    weights: np.ndarray,
    tasks: list[TaskRecord],
    cfg: HyperConfig,
    gate_override: np.ndarray | None = None,
):
    """Full-objective value and gradient bundle over an explicit task list.

    Reference implementation shared with the fit loop; `gate_override`
    substitutes a real-valued gate matrix so the gate gradient can be
    checked by finite differences (the hard threshold is flat almost
    everywhere, so the check must perturb the gate value itself).
    """
    states = np.stack([t.trajectory.states for t in tasks])
    dt = tasks[0].trajectory.grid.dt
    targets = np.stack(
        [derivative_targets(t.trajectory.states, dt, cfg.smooth_targets) for t in tasks]
    )
    feats = basis.eval_library(model.lib, model.xi, states)
    weights = np.asarray(weights, dtype=float)
    pieces, grad_w, grad_phi, q, risks = _minibatch_loss_and_grads(
        feats, targets, weights, model.gate_logits, cfg, gate_override=gate_override
    )
    grad_xi = _vjp_xi_with_cols(model.lib, model.xi, states, q, feats)
    grads = {
        "w": grad_w,
        "phi": grad_phi,
        "gate_logits": grad_phi * _sigmoid_prime(model.gate_logits),
        "xi": grad_xi,
    }
    if not np.isfinite(pieces["loss"]):
        raise FailedConfigError("non-finite total loss")
    return pieces["loss"], grads


class _Adam:
    def __init__(self, shape, eta, b1=0.9, b2=0.999, eps=1e-8):
        self.eta, self.b1, self.b2, self.eps = eta, b1, b2, eps
        self.m = np.zeros(shape)
        self.v = np.zeros(shape)
        self.t = 0

    def step(self, param, grad):
        self.t += 1
        self.m = self.b1 * self.m + (1 - self.b1) * grad
        self.v = self.b2 * self.v + (1 - self.b2) * grad * grad
        mhat = self.m / (1 - self.b1**self.t)
        vhat = self.v / (1 - self.b2**self.t)
        param -= self.eta * mhat / (np.sqrt(vhat) + self.eps)


class _AdamRows:
    """Adam over the task axis: only the rows in a minibatch advance."""

    def __init__(self, shape, eta, b1=0.9, b2=0.999, eps=1e-8):
        self.eta, self.b1, self.b2, self.eps = eta, b1, b2, eps
        self.m = np.zeros(shape)
        self.v = np.zeros(shape)
        self.t = np.zeros(shape[0], dtype=int)

    def step(self, param, grad_rows, idx):
        self.t[idx] += 1
        t = self.t[idx][:, None, None]
        self.m[idx] = self.b1 * self.m[idx] + (1 - self.b1) * grad_rows
        self.v[idx] = self.b2 * self.v[idx] + (1 - self.b2) * grad_rows * grad_rows
        mhat = self.m[idx] / (1 - self.b1**t)
        vhat = self.v[idx] / (1 - self.b2**t)
        param[idx] -= self.eta * mhat / (np.sqrt(vhat) + self.eps)


class _Sgd:
    def __init__(self, eta):
        self.eta = eta

    def step(self, param, grad):
        param -= self.eta * grad


class _SgdRows:
    def __init__(self, eta):
        self.eta = eta

    def step(self, param, grad_rows, idx):
        param[idx] -= self.eta * grad_rows


def _as_task_list(tasks) -> list[TaskRecord]:
    if isinstance(tasks, Dataset):
        return list(tasks.tasks)
    return list(tasks)


def _batched_row_lsq(
    feats: np.ndarray,  # (M, T, m)
    targets: np.ndarray,  # (M, T, d)
    g: np.ndarray,  # (d, m) binary gates
    ridge: float = 1e-8,
) -> np.ndarray:
    """Exact per-task least-squares weights over the open columns of each row.

    Columns are rescaled to unit RMS before forming the normal equations so
    wildly different feature magnitudes (population counts vs sines) do not
    wreck the conditioning.
    """
    n_tasks, _, m = feats.shape
    d = targets.shape[2]
    w = np.zeros((n_tasks, d, m))
    for j in range(d):
        active = np.where(g[j] > 0)[0]
        if active.size == 0:
            continue
        fa = feats[:, :, active]
        scale = np.sqrt(np.mean(fa**2, axis=(0, 1)))
        scale[scale == 0] = 1.0
        fa = fa / scale
        gram = np.einsum("mta,mtb->mab", fa, fa)
        gram += ridge * np.eye(active.size)
        rhs = np.einsum("mta,mt->ma", fa, targets[:, :, j])
        sol = np.linalg.solve(gram, rhs[:, :, None])[:, :, 0]
        w[:, j, active] = sol / scale
    return w


def _polish(engine, targets, logits, xi, cfg: HyperConfig):
    """Structure-frozen finish: exact task weights, gradient steps on xi.

    With gates fixed the l1 term is constant, so this phase minimizes the
    remaining objective (mean risk plus variance penalty) over the
    continuous parameters alone. Task weights are the closed-form inner
    minimizers; by the envelope theorem the xi gradient needs no W chain.
    """
    g = gates(logits)
    # Full-batch and noise-free, so the unscaled rate is safe here.
    opt_xi = _Adam(xi.shape, cfg.eta)
    w = None
    for _ in range(cfg.polish_steps):
        feats, aux = engine.features_all(xi)
        w = _batched_row_lsq(feats, targets, g)
        _, _, _, q, _ = _minibatch_loss_and_grads(feats, targets, w, logits, cfg)
        opt_xi.step(xi, engine.xi_grad(xi, q, aux))
    feats, _ = engine.features_all(xi)
    w = _batched_row_lsq(feats, targets, g)
    pieces, *_ = _minibatch_loss_and_grads(feats, targets, w, logits, cfg)
    if not np.isfinite(pieces["loss"]):
        raise FailedConfigError("non-finite loss after polish")
    return w, xi


def fit(
    tasks,
    cfg: HyperConfig,
    seed: int = 0,
    val_tasks: list[TaskRecord] | None = None,
    val_prefix_len: int | None = None,
    lib: BasisLibrary | None = None,
) -> tuple[MetaModel, TrainReport]:
    """Jointly optimize logits, xi, and all task weights by minibatch descent.

    Deterministic given (tasks, cfg, seed). Task weights advance only when
    their task is in the minibatch. Raises FailedConfigError on a non-finite
    loss.
    """
    t_start = time.perf_counter()
    if isinstance(tasks, Dataset) and val_prefix_len is None:
        val_prefix_len = tasks.prefix_len
    task_list = _as_task_list(tasks)
    if not task_list:
        raise ValueError("cannot fit on an empty task list")
    d = task_list[0].trajectory.d
    dt = task_list[0].trajectory.grid.dt
    lib = lib or basis.make_library(d)

    states = np.stack([t.trajectory.states for t in task_list])
    targets = np.stack(
        [derivative_targets(t.trajectory.states, dt, cfg.smooth_targets) for t in task_list]
    )
    engine = _FeatureEngine(lib, states)
    n_tasks = len(task_list)

    # All gates start open so every basis can earn or lose its place; task
    # weights start at zero.
    logits = np.full((d, lib.m), cfg.logit_init)
    xi = basis.default_xi(lib)
    w = np.zeros((n_tasks, d, lib.m))
    if cfg.optimizer == "adam":
        opt_logits = _Adam(logits.shape, cfg.eta)
        opt_xi = _Adam(xi.shape, cfg.eta * cfg.xi_rate_scale)
        opt_w = _AdamRows(w.shape, cfg.eta)
    else:
        opt_logits = _Sgd(cfg.eta)
        opt_xi = _Sgd(cfg.eta * cfg.xi_rate_scale)
        opt_w = _SgdRows(cfg.eta)

    rng = np.random.default_rng(seed)
    batch = max(1, min(cfg.batch_tasks, n_tasks))
    hist = {k: np.zeros(cfg.epochs) for k in ("loss", "mean_risk", "l1", "vrex")}

    for epoch in range(cfg.epochs):
        perm = rng.permutation(n_tasks)
        n_steps = 0
        for s in range(0, n_tasks, batch):
            idx = perm[s : s + batch]
            feats, aux = engine.features(xi, idx)
            pieces, grad_w, grad_phi, q, _ = _minibatch_loss_and_grads(
                feats, targets[idx], w[idx], logits, cfg
            )
            grad_logits = grad_phi * _sigmoid_prime(logits)
            grad_xi = engine.xi_grad(xi, q, aux)
            opt_w.step(w, grad_w, idx)
            opt_logits.step(logits, grad_logits)
            opt_xi.step(xi, grad_xi)
            for key in hist:
                hist[key][epoch] += pieces[key]
            n_steps += 1
        for key in hist:
            hist[key][epoch] /= n_steps
        if not np.isfinite(hist["loss"][epoch]):
            raise FailedConfigError(f"non-finite loss at epoch {epoch}")

    if cfg.polish_steps > 0:
        w, xi = _polish(engine, targets, logits, xi, cfg)

    model = MetaModel(lib=lib, xi=xi, gate_logits=logits, train_weights=w)
    val = None
    if val_tasks:
        val = validation_loss(model, val_tasks, val_prefix_len)
    report = TrainReport(
        loss=hist["loss"],
        mean_risk=hist["mean_risk"],
        l1_term=hist["l1"],
        vrex_term=hist["vrex"],
        val_loss=val,
        phi_l0=count_open_gates(model),
        wall_time=time.perf_counter() - t_start,
    )
    return model, report


def validation_loss(
    model: MetaModel,
    val_tasks: list[TaskRecord],
    prefix_len: int | None = None,
    ridge: float = 1e-8,
) -> float:
    """Mean derivative-matching risk on held-out tasks.

    Mirrors test conditions: each validation task's weights are re-fitted by
    least squares on its observation prefix (gates and xi frozen), then the
    risk is scored over the full trajectory.
    """
    total = 0.0
    for task in val_tasks:
        n = task.trajectory.grid.n_steps
        p = prefix_len if prefix_len is not None else n // 3
        prefix, _ = split_prefix(task, min(p, n - 1))
        targets = derivative_targets(prefix.states, prefix.grid.dt)
        w = fit_weights_lsq(model, prefix.states, targets, ridge=ridge)
        total += task_risk(model, w, task).value
    return total / len(val_tasks)


@dataclass
class SweepRecord:
    config: HyperConfig
    val_loss: float | None
    phi_l0: int | None
    failed: bool
    message: str = ""
    wall_time: float = 0.0
    final_loss: float | None = None


def _run_one_config(args):
    train_tasks, val_tasks, cfg, seed, prefix_len, lib = args
    try:
        mdl, report = fit(
            train_tasks, cfg, seed=seed, val_tasks=val_tasks,
            val_prefix_len=prefix_len, lib=lib,
        )
        rec = SweepRecord(
            config=cfg,
            val_loss=report.val_loss,
            phi_l0=report.phi_l0,
            failed=report.val_loss is None or not np.isfinite(report.val_loss),
            wall_time=report.wall_time,
            final_loss=float(report.loss[-1]),
        )
        return mdl, rec
    except FailedConfigError as exc:
        return None, SweepRecord(cfg, None, None, True, message=str(exc))


def n_workers_default() -> int:
    env = os.environ.get("ODEDISCOVER_THREADS")
    if env:
        return max(1, int(env))
    return os.cpu_count() or 1


def sweep_and_select(
    tasks,
    grid: SweepGrid,
    seed: int = 0,
    val_frac: float = 0.2,
    val_tasks: list[TaskRecord] | None = None,
    prefix_len: int | None = None,
    lib: BasisLibrary | None = None,
    n_workers: int | None = None,
) -> tuple[MetaModel, list[SweepRecord]]:
    """Fit every grid config, then pick the sparsest acceptable model.

    Eligible configs have validation loss within 5% of the best; among them
    the fewest open gates wins, with ties broken by lower validation loss and
    then by grid order. Returns the selected model (selection_record filled)
    plus the per-config records in grid order.
    """
    if isinstance(tasks, Dataset):
        if prefix_len is None:
            prefix_len = tasks.prefix_len
        if val_tasks is None:
            train_tasks, val_tasks = split_validation(tasks, val_frac)
        else:
            train_tasks = list(tasks.tasks)
    else:
        train_tasks = list(tasks)
        if val_tasks is None:
            raise ValueError("val_tasks is required when tasks is not a Dataset")
    configs = grid.configs()
    jobs = [(train_tasks, val_tasks, cfg, seed, prefix_len, lib) for cfg in configs]
    n_workers = n_workers if n_workers is not None else n_workers_default()
    n_workers = max(1, min(n_workers, len(jobs)))
    if n_workers == 1:
        results = [_run_one_config(j) for j in jobs]
    else:
        import multiprocessing as mp

        with mp.get_context("fork").Pool(n_workers) as pool:
            results = pool.map(_run_one_config, jobs)

    records = [rec for _, rec in results]
    ok = [(mdl, rec) for mdl, rec in results if not rec.failed]
    if not ok:
        raise AllConfigsFailedError("all sweep configurations failed")
    best_val = min(rec.val_loss for _, rec in ok)
    eligible = [(mdl, rec) for mdl, rec in ok if rec.val_loss <= 1.05 * best_val]
    order = {cfg.key(): i for i, cfg in enumerate(configs)}
    mdl, rec = min(
        eligible, key=lambda mr: (mr[1].phi_l0, mr[1].val_loss, order[mr[1].config.key()])
    )
    selected = mdl.with_selection(
        {
            "lambda_phi": rec.config.lambda_phi,
            "lambda_rex": rec.config.lambda_rex,
            "eta": rec.config.eta,
            "epochs": rec.config.epochs,
            "batch_tasks": rec.config.batch_tasks,
            "optimizer": rec.config.optimizer,
            "val_loss": rec.val_loss,
            "phi_l0": rec.phi_l0,
            "seed": seed,
        }
    )
    return selected, records
