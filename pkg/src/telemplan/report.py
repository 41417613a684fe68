"""CSV and SVG output for simulation runs.

Every file is byte-deterministic for a given run: rows are sorted, numbers
are formatted explicitly and SVG ids/metadata are pinned.
"""
from __future__ import annotations

import csv
import statistics
from pathlib import Path
from typing import Sequence

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402

from .harness import SimulationRun  # noqa: E402

plt.rcParams["svg.hashsalt"] = "telemplan"
plt.rcParams["svg.fonttype"] = "none"


def fmt(x) -> str:
    return f"{float(x):.6f}"


def _writer(path: Path):
    fh = open(path, "w", newline="")
    return fh, csv.writer(fh, lineterminator="\n")


def write_loads(runs: Sequence[SimulationRun], path: Path) -> None:
    fh, w = _writer(path)
    with fh:
        w.writerow(["window", "strategy", "sp_load"])
        for run in runs:
            for win in run.windows:
                w.writerow([win.window, run.strategy, fmt(win.sp_load)])


def write_allocation(run: SimulationRun, path: Path) -> None:
    fh, w = _writer(path)
    with fh:
        w.writerow(["window", "op", "alloc_bits", "req_bits", "rho", "load"])
        for win in run.windows:
            for o in win.operators:
                w.writerow([win.window, o.op.label(), o.alloc_bits, o.req_bits, fmt(o.rho), fmt(o.load)])


def _cov(xs) -> float:
    mean = statistics.fmean(xs)
    return statistics.pstdev(xs) / mean if mean else 0.0


def write_cov(run: SimulationRun, path: Path) -> None:
    """Variability of required memory per operator and in aggregate."""
    series: dict = {}
    for win in run.windows:
        for o in win.operators:
            series.setdefault(o.op, []).append(o.req_bits)
    totals = [sum(o.req_bits for o in win.operators) for win in run.windows]
    fh, w = _writer(path)
    with fh:
        w.writerow(["op", "mean_req_bits", "cov"])
        for op in sorted(series):
            xs = series[op]
            w.writerow([op.label(), fmt(statistics.fmean(xs)), fmt(_cov(xs) if len(xs) > 1 else 0)])
        if totals:
            w.writerow(["aggregate", fmt(statistics.fmean(totals)),
                        fmt(_cov(totals) if len(totals) > 1 else 0)])


def _save(fig, path: Path) -> None:
    fig.savefig(path, format="svg", metadata={"Date": None})
    plt.close(fig)


def plot_contributions(run: SimulationRun, path: Path) -> None:
    """Stacked per-operator load contributions for each window."""
    ops = sorted({o.op for win in run.windows for o in win.operators})
    windows = [win.window for win in run.windows]
    fig, ax = plt.subplots(figsize=(7, 3.5))
    bottom = [0.0] * len(windows)
    for op in ops:
        vals = []
        for win in run.windows:
            row = next((o for o in win.operators if o.op == op), None)
            vals.append(float(row.load) if row else 0.0)
        ax.bar(windows, vals, bottom=bottom, label=op.label())
        bottom = [b + v for b, v in zip(bottom, vals)]
    ax.set_xlabel("window")
    ax.set_ylabel("tuples to stream processor")
    ax.set_title(run.strategy)
    if len(ops) <= 12:
        ax.legend(fontsize=6, loc="upper right")
    fig.tight_layout()
    _save(fig, path)


def plot_cdf(runs: Sequence[SimulationRun], path: Path) -> None:
    fig, ax = plt.subplots(figsize=(6, 3.5))
    for run in runs:
        xs = sorted(float(x) for x in run.loads())
        ys = [(n + 1) / len(xs) for n in range(len(xs))]
        ax.step(xs, ys, where="post", label=run.strategy)
    ax.set_xlabel("tuples per window")
    ax.set_ylabel("CDF")
    ax.legend(fontsize=6)
    fig.tight_layout()
    _save(fig, path)


def emit_report(run: SimulationRun, out_dir, svg: bool = True) -> list[Path]:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    paths = [out / "loads.csv", out / "allocation.csv", out / "cov.csv"]
    write_loads([run], paths[0])
    write_allocation(run, paths[1])
    write_cov(run, paths[2])
    if svg:
        paths.append(out / "contributions.svg")
        plot_contributions(run, paths[-1])
    return paths


def emit_comparison(runs: Sequence[SimulationRun], out_dir, svg: bool = True) -> list[Path]:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    paths = [out / "loads.csv", out / "summary.csv"]
    write_loads(runs, paths[0])
    fh, w = _writer(paths[1])
    with fh:
        w.writerow(["strategy", "windows", "median_sp_load", "total_sp_load"])
        for run in runs:
            w.writerow([run.strategy, len(run.windows), fmt(run.median), fmt(run.total)])
    if svg:
        paths.append(out / "load_cdf.svg")
        plot_cdf(runs, paths[-1])
    return paths
