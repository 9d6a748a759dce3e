"""On-disk formats: datasets, models, evaluation reports, and plot data.

Trajectories travel as CSV (one row per task per time point) next to a JSON
metadata sidecar; models and reports are JSON. Every file carries a
format_version field. Floats in CSV are printed with 17 significant digits
and floats in JSON with Python's shortest round-trip repr, so a
save -> load -> save cycle is byte-identical.
"""

from __future__ import annotations

import csv
import io
import json
from pathlib import Path

import numpy as np

from . import basis
from .model import MetaModel
from .ode_sim import TimeGrid, Trajectory
from .systems import Dataset, TaskRecord, environment_for, get_system

FORMAT_VERSION = 1

TRAJ_FILE = "trajectories.csv"
META_FILE = "meta.json"


def fmt17(x: float) -> str:
    return format(float(x), ".17g")


def _write_json(path: Path, obj: dict) -> None:
    path.write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")


def save_dataset(ds: Dataset, out_dir: str | Path) -> None:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    times = ds.grid.times()
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(["task_id", "t"] + [f"x_{j}" for j in range(ds.system.d)])
    for task in ds.tasks:
        for l, t in enumerate(times):
            row = [str(task.task_id), fmt17(t)]
            row += [fmt17(v) for v in task.trajectory.states[l]]
            writer.writerow(row)
    (out / TRAJ_FILE).write_text(buf.getvalue())

    meta = {
        "format_version": FORMAT_VERSION,
        "kind": "dataset",
        "system": ds.system.name,
        "d": ds.system.d,
        "t0": ds.grid.t0,
        "dt": ds.grid.dt,
        "n_steps": ds.grid.n_steps,
        "prefix_len": ds.prefix_len,
        "split": ds.split,
        "noise_sigma": ds.noise_sigma,
        "seed": ds.seed,
        "n_tasks": len(ds.tasks),
        # Diagnostics only: training and adaptation never read true_params.
        "tasks": [
            {
                "task_id": t.task_id,
                "true_params": [float(v) for v in t.true_params],
                "retries": t.retries,
            }
            for t in ds.tasks
        ],
    }
    _write_json(out / META_FILE, meta)


def load_dataset(in_dir: str | Path) -> Dataset:
    src = Path(in_dir)
    meta = json.loads((src / META_FILE).read_text())
    if meta.get("kind") != "dataset":
        raise ValueError(f"{src} does not contain a dataset (kind={meta.get('kind')!r})")
    system = get_system(meta["system"])
    grid = TimeGrid(meta["t0"], meta["dt"], meta["n_steps"])
    env = environment_for(system, meta["split"])

    states: dict[int, list[list[float]]] = {}
    with open(src / TRAJ_FILE, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader)
        if header[:2] != ["task_id", "t"]:
            raise ValueError(f"unexpected trajectory header {header}")
        for row in reader:
            states.setdefault(int(row[0]), []).append([float(v) for v in row[2:]])

    tasks = []
    for rec in meta["tasks"]:
        tid = rec["task_id"]
        mat = np.array(states.get(tid, []), dtype=float).reshape(-1, meta["d"])
        tasks.append(
            TaskRecord(
                task_id=tid,
                trajectory=Trajectory(grid, mat),
                true_params=np.array(rec["true_params"], dtype=float),
                environment=env,
                noise_sigma=meta["noise_sigma"],
                retries=rec.get("retries", 0),
            )
        )
    return Dataset(
        tasks=tuple(tasks),
        system=system,
        grid=grid,
        prefix_len=meta["prefix_len"],
        split=meta["split"],
        noise_sigma=meta["noise_sigma"],
        seed=meta["seed"],
    )


def save_model(model: MetaModel, path: str | Path) -> None:
    obj = {
        "format_version": FORMAT_VERSION,
        "kind": "model",
        "library": basis.library_to_dict(model.lib),
        "xi": model.xi.tolist(),
        "gate_logits": model.gate_logits.tolist(),
        "gates": model.gates().astype(int).tolist(),
        "train_weights": None
        if model.train_weights is None
        else np.asarray(model.train_weights).tolist(),
        "selection_record": model.selection_record,
    }
    _write_json(Path(path), obj)


def load_model(path: str | Path) -> MetaModel:
    obj = json.loads(Path(path).read_text())
    if obj.get("kind") != "model":
        raise ValueError(f"{path} is not a model file")
    lib = basis.library_from_dict(obj["library"])
    tw = obj.get("train_weights")
    return MetaModel(
        lib=lib,
        xi=np.array(obj["xi"], dtype=float),
        gate_logits=np.array(obj["gate_logits"], dtype=float),
        train_weights=None if tw is None else np.array(tw, dtype=float),
        selection_record=obj.get("selection_record"),
    )


def save_report(report_dict: dict, out_dir: str | Path, stem: str = "report") -> None:
    """Write an EvalReport dict as JSON plus a flat per-task CSV."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    obj = {"format_version": FORMAT_VERSION, "kind": "eval_report", **report_dict}
    _write_json(out / f"{stem}.json", obj)

    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(["system", "split", "seed", "task_id", "nrmse", "nan_star"])
    for seed_block in report_dict.get("seeds", []):
        for row in seed_block["per_task"]:
            writer.writerow(
                [
                    report_dict["system"],
                    report_dict["split"],
                    str(seed_block["seed"]),
                    str(row["task_id"]),
                    "" if row["nrmse"] is None else fmt17(row["nrmse"]),
                    "1" if row["nan_star"] else "0",
                ]
            )
    (out / f"{stem}.csv").write_text(buf.getvalue())


def save_runlog(records: list[dict], path: str | Path) -> None:
    """Append sweep records to a JSON-lines run log."""
    with open(path, "a") as fh:
        for rec in records:
            fh.write(json.dumps(rec, sort_keys=True) + "\n")


def save_plot_data(
    pred: np.ndarray,
    truth: np.ndarray,
    times: np.ndarray,
    task_ids: list[int],
    path: str | Path,
) -> None:
    """Per-task predicted vs true trajectories as long-format CSV."""
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(["task_id", "t", "dim", "truth", "pred"])
    for b, tid in enumerate(task_ids):
        for l, t in enumerate(times):
            for j in range(truth.shape[2]):
                writer.writerow(
                    [str(tid), fmt17(t), str(j), fmt17(truth[b, l, j]), fmt17(pred[b, l, j])]
                )
    Path(path).write_text(buf.getvalue())


def svg_nrmse_bars(entries: list[tuple[str, float]], path: str | Path, title: str = "mean NRMSE") -> None:
    """Tiny dependency-free SVG bar chart of mean NRMSE per label."""
    width, height, margin = 640, 360, 60
    n = max(1, len(entries))
    vmax = max([v for _, v in entries if v is not None] + [1e-9])
    bar_w = (width - 2 * margin) / n * 0.7
    gap = (width - 2 * margin) / n
    parts = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}">',
        f'<text x="{width / 2:.1f}" y="24" text-anchor="middle" font-size="16">{title}</text>',
        f'<line x1="{margin}" y1="{height - margin}" x2="{width - margin}" '
        f'y2="{height - margin}" stroke="black"/>',
    ]
    for i, (label, value) in enumerate(entries):
        x = margin + i * gap + (gap - bar_w) / 2
        v = 0.0 if value is None else value
        h = (height - 2 * margin) * v / vmax
        y = height - margin - h
        parts.append(
            f'<rect x="{x:.1f}" y="{y:.1f}" width="{bar_w:.1f}" height="{h:.1f}" fill="#4878a8"/>'
        )
        shown = "NaN*" if value is None else f"{value:.3f}"
        parts.append(
            f'<text x="{x + bar_w / 2:.1f}" y="{y - 6:.1f}" text-anchor="middle" font-size="12">{shown}</text>'
        )
        parts.append(
            f'<text x="{x + bar_w / 2:.1f}" y="{height - margin + 18:.1f}" '
            f'text-anchor="middle" font-size="12">{label}</text>'
        )
    parts.append("</svg>")
    Path(path).write_text("\n".join(parts) + "\n")
