"""Seed-replicated experiment harness and ablation variants.

One experiment = for each seed: generate training tasks, sweep the
hyperparameter grid and select a model, then for each requested split
generate fresh test tasks, adapt per-task weights on each prefix, forecast
the held-out window, and score NRMSE. Tasks whose forecast leaves the
divergence guard are recorded as failures (the NaN* convention): they are
excluded from the mean and counted separately, and any failure taints the
report's flag.

Ablation variants: 'no_l1' forces the sparsity weight to zero across the
grid, 'no_vrex' forces the variance penalty to zero, and 'no_adapt' replaces
test-time adaptation with the mean of the training-task weights.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

from . import systems
from .adaptation import AdaptConfig, adapt_batch, forecast_batch, nrmse
from .basis import BasisLibrary
from .model import MetaModel, extract_equation
from .ode_sim import TimeGrid
from .sindy import sindy_forecast_batch
from .systems import Dataset, environment_for, generate, get_system
from .trainer import SweepGrid, SweepRecord, sweep_and_select

VARIANTS = ("no_l1", "no_adapt", "no_vrex")

METHOD_META = "metaphysica"
METHOD_SINDY = "sindy"

# Fixed offsets keep train and per-split test datasets on disjoint,
# reproducible random streams for every experiment seed.
_TRAIN_SEED_OFFSET = 100_000
_TEST_SEED_OFFSET = {
    systems.SPLIT_ID: 200_000,
    systems.SPLIT_OOD_X0: 300_000,
    systems.SPLIT_OOD_X0_W: 400_000,
}


@dataclass(frozen=True)
class ExperimentConfig:
    system: str
    splits: tuple[str, ...] = systems.SPLITS
    method: str = METHOD_META
    n_seeds: int = 5
    n_train: int = 1000
    n_test: int = 200
    grid: SweepGrid = field(default_factory=SweepGrid)
    adapt: AdaptConfig = field(default_factory=AdaptConfig)
    variant: str | None = None
    pooling: str = "per_dim"
    base_seed: int = 0
    val_frac: float = 0.2
    n_workers: int | None = None
    lib: BasisLibrary | None = None  # override, e.g. a composed library

    def __post_init__(self):
        if self.variant is not None and self.variant not in VARIANTS:
            raise ValueError(f"unknown variant {self.variant!r}; choose from {VARIANTS}")
        if self.method not in (METHOD_META, METHOD_SINDY):
            raise ValueError(f"unknown method {self.method!r}")


@dataclass
class SplitSeedResult:
    seed: int
    nrmse: list[float | None]  # per-task; None marks a NaN* failure
    nan_star_count: int
    equation: str = ""
    selection: dict | None = None

    @property
    def mean(self) -> float | None:
        vals = [v for v in self.nrmse if v is not None]
        return float(np.mean(vals)) if vals else None


@dataclass
class EvalReport:
    """Aggregate over seeds for one (system, split, method) cell."""

    system: str
    split: str
    method: str
    seed_results: list[SplitSeedResult]
    pooling: str = "per_dim"
    variant: str | None = None

    @property
    def seed_means(self) -> list[float | None]:
        return [r.mean for r in self.seed_results]

    @property
    def mean(self) -> float | None:
        vals = [m for m in self.seed_means if m is not None]
        return float(np.mean(vals)) if vals else None

    @property
    def std(self) -> float | None:
        vals = [m for m in self.seed_means if m is not None]
        return float(np.std(vals)) if vals else None

    @property
    def nan_star_count(self) -> int:
        return sum(r.nan_star_count for r in self.seed_results)

    @property
    def nan_star_flagged(self) -> bool:
        return self.nan_star_count > 0

    def to_dict(self) -> dict:
        return {
            "system": self.system,
            "split": self.split,
            "method": self.method,
            "variant": self.variant,
            "pooling": self.pooling,
            "nrmse_mean": self.mean,
            "nrmse_std": self.std,
            "nan_star_count": self.nan_star_count,
            "nan_star_flagged": self.nan_star_flagged,
            "seeds": [
                {
                    "seed": r.seed,
                    "mean": r.mean,
                    "nan_star_count": r.nan_star_count,
                    "equation": r.equation,
                    "selection": r.selection,
                    "per_task": [
                        {"task_id": i, "nrmse": v, "nan_star": v is None}
                        for i, v in enumerate(r.nrmse)
                    ],
                }
                for r in self.seed_results
            ],
        }


def train_seed_for(base_seed: int, seed_index: int) -> int:
    return _TRAIN_SEED_OFFSET + base_seed + seed_index


def test_seed_for(base_seed: int, seed_index: int, split: str) -> int:
    return _TEST_SEED_OFFSET[split] + base_seed + seed_index


def evaluate_model_on_split(
    model: MetaModel,
    test_ds: Dataset,
    adapt_cfg: AdaptConfig | None = None,
    pooling: str = "per_dim",
    no_adapt: bool = False,
) -> SplitSeedResult:
    """Adapt + forecast + score every task of one test dataset."""
    if not test_ds.tasks:
        return SplitSeedResult(seed=test_ds.seed, nrmse=[], nan_star_count=0)
    adapt_cfg = adapt_cfg or AdaptConfig()
    p = test_ds.prefix_len
    n_steps = test_ds.grid.n_steps
    horizon = n_steps - p
    prefix_states = np.stack([t.trajectory.states[: p + 1] for t in test_ds.tasks])
    truth = np.stack([t.trajectory.states[p + 1 :] for t in test_ds.tasks])
    dt = test_ds.grid.dt

    if no_adapt:
        if model.train_weights is None:
            raise ValueError("no_adapt evaluation needs stored training weights")
        w_mean = model.train_weights.mean(axis=0)
        ws = np.broadcast_to(w_mean, (len(test_ds.tasks),) + w_mean.shape)
    else:
        ws, _info = adapt_batch(model, prefix_states, dt, adapt_cfg)

    horizon_grid = TimeGrid(test_ds.grid.t0 + p * dt, dt, horizon)
    pred, ok = forecast_batch(model, ws, prefix_states[:, -1], horizon_grid, n_sub=adapt_cfg.n_sub)
    return _score(pred, ok, truth, test_ds.seed, pooling)


def evaluate_sindy_on_split(
    test_ds: Dataset,
    lib: BasisLibrary,
    pooling: str = "per_dim",
    n_sub: int = 10,
) -> SplitSeedResult:
    if not test_ds.tasks:
        return SplitSeedResult(seed=test_ds.seed, nrmse=[], nan_star_count=0)
    p = test_ds.prefix_len
    horizon = test_ds.grid.n_steps - p
    prefix_states = np.stack([t.trajectory.states[: p + 1] for t in test_ds.tasks])
    truth = np.stack([t.trajectory.states[p + 1 :] for t in test_ds.tasks])
    pred, ok = sindy_forecast_batch(
        prefix_states, test_ds.grid.dt, horizon, lib, n_sub=n_sub
    )
    return _score(pred, ok, truth, test_ds.seed, pooling)


def _score(pred, ok, truth, seed, pooling) -> SplitSeedResult:
    scores: list[float | None] = []
    failures = 0
    for b in range(truth.shape[0]):
        if not ok[b]:
            scores.append(None)
            failures += 1
            continue
        v = nrmse(pred[b, 1:], truth[b], pooling=pooling)
        if np.isfinite(v):
            scores.append(float(v))
        else:
            scores.append(None)
            failures += 1
    return SplitSeedResult(seed=seed, nrmse=scores, nan_star_count=failures)


def variant_grid(grid: SweepGrid, variant: str | None) -> SweepGrid:
    if variant == "no_l1":
        return replace(grid, lambda_phis=(0.0,))
    if variant == "no_vrex":
        return replace(grid, lambda_rexs=(0.0,))
    return grid


def run_experiment(
    cfg: ExperimentConfig,
    pretrained: dict[int, MetaModel] | None = None,
    progress=None,
) -> tuple[dict[str, EvalReport], dict[int, MetaModel], dict[int, list[SweepRecord]]]:
    """Full pipeline over cfg.n_seeds seeds.

    `pretrained` maps experiment seed index -> already-fitted model, letting
    the no_adapt ablation (identical training, different evaluation) reuse
    the main run's models. Returns (reports by split, models by seed,
    sweep records by seed).
    """
    system = get_system(cfg.system)
    grid = variant_grid(cfg.grid, cfg.variant)
    state_names = list(system.state_names)
    reports = {split: EvalReport(system.name, split, cfg.method, [], cfg.pooling, cfg.variant)
               for split in cfg.splits}
    models: dict[int, MetaModel] = {}
    sweep_records: dict[int, list[SweepRecord]] = {}

    for s in range(cfg.n_seeds):
        say = (lambda msg: progress(f"[seed {s}] {msg}")) if progress else (lambda msg: None)
        model = None
        if cfg.method == METHOD_META:
            if pretrained and s in pretrained:
                model = pretrained[s]
                say("using pretrained model")
            else:
                say("generating training data")
                train_env = environment_for(system, systems.SPLIT_ID)
                train_ds = generate(
                    system, train_env, cfg.n_train, seed=train_seed_for(cfg.base_seed, s)
                )
                say(f"sweeping {len(grid.configs())} configs")
                model, recs = sweep_and_select(
                    train_ds, grid, seed=cfg.base_seed + s,
                    val_frac=cfg.val_frac, lib=cfg.lib, n_workers=cfg.n_workers,
                )
                sweep_records[s] = recs
            models[s] = model

        for split in cfg.splits:
            say(f"evaluating split {split}")
            test_env = environment_for(system, split)
            test_ds = generate(
                system, test_env, cfg.n_test,
                seed=test_seed_for(cfg.base_seed, s, split),
            )
            if cfg.method == METHOD_SINDY:
                from .basis import make_library

                lib = cfg.lib or make_library(system.d)
                res = evaluate_sindy_on_split(test_ds, lib, pooling=cfg.pooling)
            else:
                res = evaluate_model_on_split(
                    model, test_ds, cfg.adapt, pooling=cfg.pooling,
                    no_adapt=(cfg.variant == "no_adapt"),
                )
                res.equation = extract_equation(model, state_names=state_names)
                res.selection = model.selection_record
            reports[split].seed_results.append(res)
    return reports, models, sweep_records


def run_ablation(
    system: str,
    variant: str,
    cfg: ExperimentConfig | None = None,
    pretrained: dict[int, MetaModel] | None = None,
    progress=None,
) -> tuple[dict[str, EvalReport], dict[int, MetaModel], dict[int, list[SweepRecord]]]:
    """Run one ablation variant; see module docstring for the three variants."""
    if variant not in VARIANTS:
        raise ValueError(f"unknown variant {variant!r}; choose from {VARIANTS}")
    base = cfg or ExperimentConfig(system=system)
    abl = replace(base, system=system, variant=variant)
    if variant != "no_adapt":
        pretrained = None  # training itself differs for the penalty ablations
    return run_experiment(abl, pretrained=pretrained, progress=progress)
