"""Benchmark dynamical systems, environment sampling, and dataset generation.

Each task is one simulated experiment: an initial state and a parameter
vector drawn from its environment, integrated on a shared time grid, then
observed with optional relative Gaussian noise. Environments differ by
split: the in-distribution split and the OOD-initial-condition split share
the parameter range (1x to 2x the base parameters), while the joint OOD
split shifts parameters to 2x..3x.

Task randomness is counter-based: task i under seed s always receives the
same draws no matter how many tasks are generated, via
SeedSequence(s, spawn_key=(task_index, attempt)).
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .ode_sim import (
    Diverged,
    DivergenceGuard,
    TimeGrid,
    Trajectory,
    VectorField,
    integrate_batch,
)

SPLIT_ID = "id"
SPLIT_OOD_X0 = "ood_x0"
SPLIT_OOD_X0_W = "ood_x0_w"
SPLITS = (SPLIT_ID, SPLIT_OOD_X0, SPLIT_OOD_X0_W)

PENDULUM = "pendulum"
PREDATOR_PREY = "predator_prey"
SIR = "sir"
COMPLEX_ODE = "complex_ode"
SYSTEM_NAMES = (PENDULUM, PREDATOR_PREY, SIR, COMPLEX_ODE)


class UnknownSystemError(ValueError):
    pass


class OutOfRangeError(ValueError):
    pass


class SimulationDivergedError(RuntimeError):
    """A sampled task kept diverging after the retry budget was exhausted."""


@dataclass(frozen=True)
class SystemSpec:
    name: str
    d: int
    state_names: tuple[str, ...]
    param_names: tuple[str, ...]
    param_base: np.ndarray


@dataclass(frozen=True)
class EnvironmentSpec:
    """Per-split sampling ranges: uniform x0 box and parameter multipliers."""

    split: str
    x0_low: np.ndarray
    x0_high: np.ndarray
    w_mult: tuple[float, float]

    def __post_init__(self):
        if not np.all(self.x0_high >= self.x0_low):
            raise ValueError("x0 ranges must satisfy high >= low")
        if not self.w_mult[1] >= self.w_mult[0]:
            raise ValueError("parameter multipliers must be ordered")


@dataclass(frozen=True)
class TaskRecord:
    task_id: int
    trajectory: Trajectory  # noisy observations
    true_params: np.ndarray  # diagnostics only; never read by training/adaptation
    environment: EnvironmentSpec
    noise_sigma: float
    retries: int = 0


@dataclass(frozen=True)
class Dataset:
    tasks: tuple[TaskRecord, ...]
    system: SystemSpec
    grid: TimeGrid
    prefix_len: int
    split: str
    noise_sigma: float
    seed: int


_SPECS = {
    PENDULUM: SystemSpec(
        PENDULUM, 2, ("theta", "omega"), ("alpha", "rho"), np.array([1.0, 0.2])
    ),
    PREDATOR_PREY: SystemSpec(
        PREDATOR_PREY,
        2,
        ("p", "q"),
        ("alpha", "beta", "gamma", "delta"),
        np.array([1.0, 0.06, 0.5, 0.0005]),
    ),
    SIR: SystemSpec(SIR, 3, ("S", "I", "R"), ("beta", "gamma"), np.array([4.0, 0.4])),
    COMPLEX_ODE: SystemSpec(
        COMPLEX_ODE, 2, ("p", "q"), ("a", "b", "c"), np.array([1.0, 1.0, 1.0])
    ),
}


def get_system(name: str) -> SystemSpec:
    key = name.lower().replace("-", "_")
    if key not in _SPECS:
        raise UnknownSystemError(f"unknown system {name!r}; choose from {SYSTEM_NAMES}")
    return _SPECS[key]


def ground_truth_field(system: SystemSpec, w: np.ndarray) -> VectorField:
    """The exact right-hand side of the system with parameters w bound in."""
    w = np.asarray(w, dtype=float)
    if w.shape != (len(system.param_names),):
        raise ValueError(
            f"{system.name} expects {len(system.param_names)} parameters, got shape {w.shape}"
        )
    if system.name == PENDULUM:
        alpha, rho = w

        def f(x):
            theta, omega = x[..., 0], x[..., 1]
            return np.stack([omega, -(alpha**2) * np.sin(theta) - rho * omega], axis=-1)

    elif system.name == PREDATOR_PREY:
        alpha, beta, gamma, delta = w

        def f(x):
            p, q = x[..., 0], x[..., 1]
            return np.stack([alpha * p - beta * p * q, delta * p * q - gamma * q], axis=-1)

    elif system.name == SIR:
        beta, gamma = w

        def f(x):
            s, i, r = x[..., 0], x[..., 1], x[..., 2]
            n = s + i + r
            inf = beta * s * i / n
            return np.stack([-inf, inf - gamma * i, gamma * i], axis=-1)

    elif system.name == COMPLEX_ODE:
        a, b, c = w

        def f(x):
            p, q = x[..., 0], x[..., 1]
            return np.stack(
                [a * np.sin(p) + b * np.sin(q**2), c * np.sin(p) * np.cos(q)], axis=-1
            )

    else:  # pragma: no cover - guarded by get_system
        raise UnknownSystemError(system.name)

    return VectorField(dim=system.d, func=f)


def _batched_field(system: SystemSpec, ws: np.ndarray) -> VectorField:
    """Vector field where row b of a batched state uses parameter row b."""
    ws = np.asarray(ws, dtype=float)
    if system.name == PENDULUM:
        alpha, rho = ws[:, 0], ws[:, 1]

        def f(x):
            return np.stack(
                [x[:, 1], -(alpha**2) * np.sin(x[:, 0]) - rho * x[:, 1]], axis=-1
            )

    elif system.name == PREDATOR_PREY:
        alpha, beta, gamma, delta = ws[:, 0], ws[:, 1], ws[:, 2], ws[:, 3]

        def f(x):
            pq = x[:, 0] * x[:, 1]
            return np.stack([alpha * x[:, 0] - beta * pq, delta * pq - gamma * x[:, 1]], axis=-1)

    elif system.name == SIR:
        beta, gamma = ws[:, 0], ws[:, 1]

        def f(x):
            n = x.sum(axis=1)
            inf = beta * x[:, 0] * x[:, 1] / n
            return np.stack([-inf, inf - gamma * x[:, 1], gamma * x[:, 1]], axis=-1)

    elif system.name == COMPLEX_ODE:
        a, b, c = ws[:, 0], ws[:, 1], ws[:, 2]

        def f(x):
            return np.stack(
                [
                    a * np.sin(x[:, 0]) + b * np.sin(x[:, 1] ** 2),
                    c * np.sin(x[:, 0]) * np.cos(x[:, 1]),
                ],
                axis=-1,
            )

    else:  # pragma: no cover
        raise UnknownSystemError(system.name)

    return VectorField(dim=system.d, func=f)


# Appendix-style sampling boxes per system and split. A degenerate range
# (low == high) pins that coordinate, e.g. omega0 = 0 in training.
def environment_for(system: SystemSpec, split: str) -> EnvironmentSpec:
    split = split.lower().replace("-", "_")
    if split not in SPLITS:
        raise ValueError(f"unknown split {split!r}; choose from {SPLITS}")
    w_mult = (2.0, 3.0) if split == SPLIT_OOD_X0_W else (1.0, 2.0)
    name = system.name
    if name == PENDULUM:
        if split == SPLIT_ID:
            low, high = [0.0, 0.0], [math.pi / 2, 0.0]
        else:
            low, high = [math.pi - 0.1, -1.0], [math.pi, 0.0]
    elif name == PREDATOR_PREY:
        if split == SPLIT_ID:
            low, high = [1000.0, 10.0], [2000.0, 20.0]
        else:
            low, high = [100.0, 10.0], [200.0, 20.0]
    elif name == SIR:
        if split == SPLIT_ID:
            low, high = [9.0, 1.0, 0.0], [10.0, 5.0, 0.0]
        else:
            low, high = [90.0, 1.0, 0.0], [100.0, 5.0, 0.0]
    elif name == COMPLEX_ODE:
        # Parameters stay at 1x..1.5x here (the task's published setup);
        # only the joint-OOD split shifts them.
        if split == SPLIT_ID:
            low, high = [0.5, 0.5], [1.0, 1.0]
        else:
            low, high = [1.0, 1.0], [1.5, 1.5]
        if split != SPLIT_OOD_X0_W:
            w_mult = (1.0, 1.5)
    else:  # pragma: no cover
        raise UnknownSystemError(name)
    return EnvironmentSpec(split, np.array(low), np.array(high), w_mult)


def default_grid(system: SystemSpec) -> TimeGrid:
    return TimeGrid(t0=0.0, dt=0.1, n_steps=100)


def default_prefix_len(system: SystemSpec) -> int:
    # Observed test window t_0..t_r: one third of the horizon, except the
    # epidemic system which only reveals the first tenth.
    return 10 if system.name == SIR else 33


def default_noise_sigma(system: SystemSpec) -> float:
    return 0.01 if system.name == PENDULUM else 0.0


def _task_rng(seed: int, task_index: int, attempt: int) -> np.random.Generator:
    ss = np.random.SeedSequence(entropy=seed, spawn_key=(task_index, attempt))
    return np.random.Generator(np.random.Philox(ss))


def _sample_task(
    rng: np.random.Generator, system: SystemSpec, env: EnvironmentSpec
) -> tuple[np.ndarray, np.ndarray]:
    x0 = rng.uniform(env.x0_low, env.x0_high)
    lo, hi = env.w_mult
    w = rng.uniform(lo * system.param_base, hi * system.param_base)
    return x0, w


def generate(
    system: SystemSpec,
    env: EnvironmentSpec,
    n_tasks: int,
    grid: TimeGrid | None = None,
    noise_sigma: float | None = None,
    seed: int = 0,
    n_sub: int = 10,
    guard: DivergenceGuard | None = None,
    max_retries: int = 20,
    prefix_len: int | None = None,
) -> Dataset:
    """Simulate `n_tasks` experiments from `env` and add observation noise.

    Noise is relative: per dimension, sigma = noise_sigma * population std of
    that dimension's clean trajectory. Tasks whose simulation diverges are
    resampled from the same task substream (next attempt counter), which
    leaves every other task's draws untouched.
    """
    if grid is None:
        grid = default_grid(system)
    if noise_sigma is None:
        noise_sigma = default_noise_sigma(system)
    if prefix_len is None:
        prefix_len = default_prefix_len(system)
    if not 1 <= prefix_len <= grid.n_steps:
        raise OutOfRangeError(f"prefix_len {prefix_len} outside 1..{grid.n_steps}")
    if guard is None:
        guard = DivergenceGuard()

    rngs = [_task_rng(seed, i, 0) for i in range(n_tasks)]
    draws = [_sample_task(rngs[i], system, env) for i in range(n_tasks)]
    x0s = np.array([d[0] for d in draws]).reshape(n_tasks, system.d)
    ws = np.array([d[1] for d in draws]).reshape(n_tasks, len(system.param_names))
    retries = np.zeros(n_tasks, dtype=int)

    if n_tasks > 0:
        states, last_valid = integrate_batch(
            _batched_field(system, ws), x0s, grid, guard=guard, n_sub=n_sub
        )
        for i in np.where(last_valid < grid.n_steps)[0]:
            for attempt in range(1, max_retries + 1):
                rngs[i] = _task_rng(seed, i, attempt)
                x0s[i], ws[i] = _sample_task(rngs[i], system, env)
                res = integrate_batch(
                    _batched_field(system, ws[i : i + 1]), x0s[i : i + 1], grid,
                    guard=guard, n_sub=n_sub,
                )
                if res[1][0] == grid.n_steps:
                    states[i] = res[0][0]
                    retries[i] = attempt
                    break
            else:
                raise SimulationDivergedError(
                    f"task {i} diverged {max_retries + 1} times under {env.split}"
                )
    else:
        states = np.zeros((0, grid.n_points, system.d))

    tasks = []
    for i in range(n_tasks):
        clean = states[i]
        obs = clean
        if noise_sigma > 0:
            scale = noise_sigma * clean.std(axis=0)
            obs = clean + rngs[i].normal(size=clean.shape) * scale
        tasks.append(
            TaskRecord(
                task_id=i,
                trajectory=Trajectory(grid, obs),
                true_params=ws[i].copy(),
                environment=env,
                noise_sigma=noise_sigma,
                retries=int(retries[i]),
            )
        )
    return Dataset(
        tasks=tuple(tasks),
        system=system,
        grid=grid,
        prefix_len=prefix_len,
        split=env.split,
        noise_sigma=noise_sigma,
        seed=seed,
    )


def split_prefix(task: TaskRecord, prefix_len: int) -> tuple[Trajectory, Trajectory]:
    """Cut one task into (observed t0..t_r, held out t_{r+1}..t_T)."""
    traj = task.trajectory
    n = traj.grid.n_steps
    if not 1 <= prefix_len < n:
        raise OutOfRangeError(f"prefix_len {prefix_len} outside 1..{n - 1}")
    observed = Trajectory(traj.grid.shifted(0, prefix_len), traj.states[: prefix_len + 1])
    held_out = Trajectory(
        traj.grid.shifted(prefix_len + 1, n - prefix_len - 1),
        traj.states[prefix_len + 1 :],
    )
    return observed, held_out


def split_validation(dataset: Dataset, frac: float = 0.2) -> tuple[list[TaskRecord], list[TaskRecord]]:
    """Deterministically carve the trailing `frac` of tasks for validation."""
    n = len(dataset.tasks)
    n_val = int(round(frac * n))
    if n_val == 0 or n_val >= n:
        raise ValueError(f"validation fraction {frac} leaves no usable split for {n} tasks")
    return list(dataset.tasks[: n - n_val]), list(dataset.tasks[n - n_val :])
