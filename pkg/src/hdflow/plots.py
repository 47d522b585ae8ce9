"""Vector figures: maze trajectories, loss curves, the guidance-gap fit and ablation bars."""

from __future__ import annotations

import io
import json
from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402
from matplotlib.patches import Circle, Rectangle  # noqa: E402

from .gap import loglog_slope, read_gap_csv  # noqa: E402
from .maze import MazeSpec  # noqa: E402
from .records import DataFormatError, read_csv, write_atomic  # noqa: E402

KINDS = ("trajectory", "losses", "gap", "ablation")

plt.rcParams["svg.hashsalt"] = "hdflow"  # stable element ids


def _save(fig, path) -> None:
    buf = io.BytesIO()
    fig.savefig(buf, format="svg", metadata={"Date": None})
    plt.close(fig)
    write_atomic(path, buf.getvalue())


def read_trace(path) -> list[dict]:
    steps = []
    for n, ln in enumerate(Path(path).read_text().splitlines(), start=1):
        if not ln.strip():
            continue
        try:
            steps.append(json.loads(ln))
        except ValueError as exc:
            raise DataFormatError(f"{path}: line {n}: {exc}") from exc
    if not steps:
        raise DataFormatError(f"{path}: empty trace")
    return steps


def plot_trajectory(maze: MazeSpec, trace: list[dict], path) -> None:
    """Walls, start, executed path, decoded subgoals and the goal disc."""
    fig, ax = plt.subplots(figsize=(5, 5))
    cs = maze.cell_size
    walls = maze.walls
    for y in range(maze.height):
        for x in range(maze.width):
            if walls[y, x]:
                ax.add_patch(Rectangle((x * cs, y * cs), cs, cs, color="0.3"))
    pos = np.array([s["position"] for s in trace])
    goal = np.asarray(trace[0]["goal"])
    ax.add_patch(Circle(goal, maze.goal_radius, color="tab:green", alpha=0.4, label="goal"))
    ax.plot(pos[:, 0], pos[:, 1], "-", color="tab:blue", lw=1.5, label="path")
    ax.plot(*pos[0], "o", color="tab:orange", ms=8, label="start")
    subs = [s["subgoal_position"] for s in trace if s.get("subgoal_position") is not None]
    if subs:
        sp = np.unique(np.round(np.array(subs), 9), axis=0)
        ax.plot(sp[:, 0], sp[:, 1], "x", color="tab:red", ms=6, label="subgoals")
    w, h = maze.extent()
    ax.set_xlim(0, w)
    ax.set_ylim(0, h)
    ax.set_aspect("equal")
    ax.legend(loc="upper left", fontsize=7)
    _save(fig, path)


def plot_losses(path_csv, path) -> None:
    rows = read_csv(path_csv)
    cols = list(rows[0])
    xcol = next((c for c in ("epoch", "iteration") if c in cols), None)
    series = [c for c in cols if c != xcol]
    try:
        x = np.array([float(r[xcol]) for r in rows]) if xcol else np.arange(1, len(rows) + 1)
        data = {c: np.array([float(r[c]) if r[c] != "" else np.nan for r in rows]) for c in series}
    except ValueError as exc:
        raise DataFormatError(f"{path_csv}: non-numeric entry: {exc}") from exc
    fig, ax = plt.subplots(figsize=(6, 4))
    for c, y in data.items():
        if np.all(np.isfinite(y[~np.isnan(y)])) and np.nanmin(y) > 0:
            ax.plot(x, y, label=c)
    ax.set_yscale("log")
    ax.set_xlabel(xcol or "row")
    ax.legend(fontsize=7)
    _save(fig, path)


def plot_gap(path_csv, path) -> None:
    """Log-log gap against dimension, one line per diffusion step, with the mean fitted slope."""
    rows = read_gap_csv(path_csv)
    fig, ax = plt.subplots(figsize=(6, 4))
    slopes = []
    for l in sorted({r.step for r in rows}):
        sub = sorted((r for r in rows if r.step == l), key=lambda r: r.d)
        d = np.array([r.d for r in sub], dtype=float)
        g = np.array([r.delta_ebm for r in sub])
        ax.plot(d, g, "o", ms=4)
        if len(sub) > 1:
            k, b = np.polyfit(np.log(d), np.log(g), 1)
            slopes.append(loglog_slope(d, g))
            ax.plot(d, np.exp(b) * d**k, "-", lw=1, label=f"l={l}")
    ax.set_xscale("log")
    ax.set_yscale("log")
    ax.set_xlabel("dimension d")
    ax.set_ylabel("guidance gap")
    if slopes:
        ax.set_title(f"mean log-log slope {np.mean(slopes):.3f}")
    ax.legend(fontsize=7)
    _save(fig, path)


def plot_ablation(path_csv, path) -> None:
    rows = read_csv(path_csv, required=("name", "success_rate"))
    names = [r["name"] for r in rows]
    try:
        rates = np.array([float(r["success_rate"]) for r in rows])
    except ValueError as exc:
        raise DataFormatError(f"{path_csv}: non-numeric success_rate: {exc}") from exc
    # average repeated names (for example several seeds of one K)
    uniq = list(dict.fromkeys(names))
    means = [rates[[n == u for n in names]].mean() for u in uniq]
    fig, ax = plt.subplots(figsize=(6, 4))
    ax.bar(range(len(uniq)), means, color="tab:blue")
    ax.set_xticks(range(len(uniq)), uniq, rotation=30, ha="right")
    ax.set_ylim(0, 1.05)
    ax.set_ylabel("success rate")
    fig.tight_layout()
    _save(fig, path)
