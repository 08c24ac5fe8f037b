"""Aggregate run directories into CSV tables, a markdown summary and figures.

CSV files are the ground truth; every plotted number is read from the
same arrays that are written to CSV.
"""

from __future__ import annotations

import csv
import json
from collections import defaultdict
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from matplotlib.figure import Figure
from PIL import Image

from . import corpus, evalkit, taskforge
from .errors import UndefinedMetricError
from .loop import read_record_csv

CURVE_COLUMNS = ("method", "after_task", "mean_accuracy", "std_accuracy", "n_runs")
SUCCESS_COLUMNS = ("method", "eval_task", "mean_success", "std_success", "n_runs")
OMEGA_COLUMNS = ("method", "n_runs", "omega_base", "omega_base_std", "omega_new", "omega_new_std",
                 "omega_all", "omega_all_std", "final_success", "final_success_std")


@dataclass
class RunData:
    path: Path
    method: str
    seed: int
    n_tasks: int
    accuracy: dict
    success: dict

    def curve(self) -> np.ndarray:
        """Mean accuracy over learned tasks after each task."""
        return np.array([np.mean([self.accuracy[(i, j)] for j in range(1, i + 1)])
                         for i in range(1, self.n_tasks + 1)])

    def final_success(self) -> np.ndarray:
        n = self.n_tasks
        return np.array([self.success[(n, j)] for j in range(1, n + 1)])


def load_run(run_dir) -> RunData:
    """Read a finished run; a missing cell of the lower-triangular matrix is an error."""
    run_dir = Path(run_dir)
    if not run_dir.is_dir():
        raise FileNotFoundError(f"run directory {run_dir} not found")
    cfg_path = run_dir / "config.json"
    if not cfg_path.is_file():
        raise FileNotFoundError(f"{cfg_path} not found; is {run_dir} a run directory?")
    cfg = json.loads(cfg_path.read_text())
    acc, succ = read_record_csv(run_dir)
    n = len(cfg["suite"])
    missing = [(i, j) for i in range(1, n + 1) for j in range(1, i + 1) if (i, j) not in acc]
    if missing:
        raise UndefinedMetricError(f"{run_dir / 'record.csv'} is incomplete; missing (i, j) cells: {missing}")
    return RunData(run_dir, cfg["train"]["strategy"], cfg["train"]["seed"], n, acc, succ)


def _std(values) -> float:
    return float(np.std(values, ddof=1)) if len(values) > 1 else 0.0


def _group(runs) -> dict:
    groups = defaultdict(list)
    for r in runs:
        groups[r.method].append(r)
    return dict(groups)


def curve_rows(runs) -> list:
    rows = []
    for method, group in _group(runs).items():
        curves = np.stack([r.curve() for r in group])
        for i in range(curves.shape[1]):
            rows.append({"method": method, "after_task": i + 1, "mean_accuracy": float(curves[:, i].mean()),
                         "std_accuracy": _std(curves[:, i]), "n_runs": len(group)})
    return rows


def success_rows(runs) -> list:
    rows = []
    for method, group in _group(runs).items():
        succ = np.stack([r.final_success() for r in group])
        for j in range(succ.shape[1]):
            rows.append({"method": method, "eval_task": j + 1, "mean_success": float(succ[:, j].mean()),
                         "std_success": _std(succ[:, j]), "n_runs": len(group)})
    return rows


def omega_rows(runs, alpha_ideal: float = 1.0) -> list:
    rows = []
    for method, group in _group(runs).items():
        scores = [evalkit.omega_scores(evalkit.AccuracyMatrix(r.accuracy, r.n_tasks, alpha_ideal)) for r in group]
        fs = [float(r.final_success().mean()) for r in group]
        row = {"method": method, "n_runs": len(group)}
        for name in ("omega_base", "omega_new", "omega_all"):
            vals = [getattr(s, name) for s in scores]
            row[name] = float(np.mean(vals))
            row[name + "_std"] = _std(vals)
        row["final_success"] = float(np.mean(fs))
        row["final_success_std"] = _std(fs)
        rows.append(row)
    return rows


def write_csv(path, columns, rows) -> Path:
    path = Path(path)
    with path.open("w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=columns)
        w.writeheader()
        for row in rows:
            w.writerow({k: repr(v) if isinstance(v, float) else v for k, v in row.items()})
    return path


def omega_markdown(rows) -> str:
    head = "| method | runs | Ω_base | Ω_new | Ω_all | final success |\n|---|---|---|---|---|---|\n"
    body = "".join(
        f"| {r['method']} | {r['n_runs']} | {r['omega_base']:.3f} ± {r['omega_base_std']:.3f} "
        f"| {r['omega_new']:.3f} ± {r['omega_new_std']:.3f} | {r['omega_all']:.3f} ± {r['omega_all_std']:.3f} "
        f"| {r['final_success']:.3f} ± {r['final_success_std']:.3f} |\n"
        for r in rows
    )
    return head + body


def plot_forgetting(rows):
    # a bare Figure renders through Agg without touching pyplot's global state
    fig = Figure(figsize=(5, 3.5))
    ax = fig.subplots()
    by_method = defaultdict(list)
    for r in rows:
        by_method[r["method"]].append(r)
    for method, rs in by_method.items():
        x = np.array([r["after_task"] for r in rs])
        y = np.array([r["mean_accuracy"] for r in rs])
        s = np.array([r["std_accuracy"] for r in rs])
        ax.plot(x, y, marker="o", label=method)
        if rs[0]["n_runs"] > 1:
            ax.fill_between(x, y - s, y + s, alpha=0.2)
    ax.set_xlabel("tasks learned")
    ax.set_ylabel("mean accuracy over learned tasks")
    ax.set_ylim(0, 1.05)
    ax.legend(fontsize=7)
    fig.tight_layout()
    return fig


def plot_success(rows):
    methods = list(dict.fromkeys(r["method"] for r in rows))
    tasks = sorted({r["eval_task"] for r in rows})
    fig = Figure(figsize=(5, 3.5))
    ax = fig.subplots()
    width = 0.8 / max(len(methods), 1)
    for k, method in enumerate(methods):
        rs = {r["eval_task"]: r for r in rows if r["method"] == method}
        x = np.array(tasks) + (k - (len(methods) - 1) / 2) * width
        ax.bar(x, [rs[t]["mean_success"] for t in tasks], width,
               yerr=[rs[t]["std_success"] for t in tasks], label=method)
    ax.set_xticks(tasks)
    ax.set_xlabel("task")
    ax.set_ylabel("success rate after the last task")
    ax.set_ylim(0, 1.05)
    ax.legend(fontsize=7)
    fig.tight_layout()
    return fig


def pseudo_montage(sample_dir, max_trajectories: int = 4, max_frames: int = 10, pad: int = 2) -> Image.Image:
    """Grid image: one row per dumped trajectory, frames left to right."""
    trajs, _ = corpus.load_trajectories(sample_dir)
    trajs = trajs[:max_trajectories]
    h, w = trajs[0].frames.shape[1:3]
    cols = min(max_frames, max(len(t.frames) for t in trajs))
    canvas = np.full((len(trajs) * (h + pad) + pad, cols * (w + pad) + pad, 3), 255, np.uint8)
    for r, tr in enumerate(trajs):
        for c, f in enumerate(tr.frames[:cols]):
            y, x = pad + r * (h + pad), pad + c * (w + pad)
            canvas[y:y + h, x:x + w] = taskforge.denormalize(f)
    return Image.fromarray(canvas)


def build_report(run_dirs, out_dir, alpha_ideal: float = 1.0) -> dict:
    """Write every report artifact into ``out_dir``; returns ``{name: path}``."""
    if not run_dirs:
        raise FileNotFoundError("no run directories given")
    runs = [load_run(d) for d in run_dirs]
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    curves, succ, omega = curve_rows(runs), success_rows(runs), omega_rows(runs, alpha_ideal)
    made = {
        "curves_csv": write_csv(out / "curves.csv", CURVE_COLUMNS, curves),
        "success_csv": write_csv(out / "success.csv", SUCCESS_COLUMNS, succ),
        "omega_csv": write_csv(out / "omega.csv", OMEGA_COLUMNS, omega),
    }
    (out / "omega.md").write_text(omega_markdown(omega))
    made["omega_md"] = out / "omega.md"
    for name, fig in (("forgetting", plot_forgetting(curves)), ("success", plot_success(succ))):
        path = out / f"{name}.png"
        fig.savefig(path, dpi=120)
        made[name] = path
    for r in runs:
        samples = r.path / "pseudo_samples"
        if not samples.is_dir():
            continue
        for tdir in sorted(p for p in samples.iterdir() if (p / "meta.json").is_file()):
            path = out / f"pseudo_{r.method}_seed{r.seed}_{tdir.name}.png"
            pseudo_montage(tdir).save(path)
            made[path.stem] = path
    return made
