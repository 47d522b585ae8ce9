"""End-to-end runs shared by the command line, the experiment scripts and the tests."""

from __future__ import annotations

import logging
import time
from dataclasses import dataclass, replace

import numpy as np

from . import diffusion as dm
from .config import RunConfig
from .core import RngStream
from .maze import Demonstration, MazeSpec, generate_dataset
from .planner import EvalReport, Planner, PlannerPolicy, evaluate, train_planner
from .world_model import LatentRecord, WorldModelConfig, WorldModelParams, export_latent_dataset, train_world_model

log = logging.getLogger(__name__)

COMPONENTS = ("full", "no-proj", "no-ebm", "no-contrastive")
K_SWEEP = (2, 3, 5, 8, 12)


@dataclass
class Stage1:
    maze: MazeSpec
    demos: list[Demonstration]
    wm: WorldModelParams
    wm_cfg: WorldModelConfig
    curves: list
    records: list[LatentRecord]
    seconds: float


def schedule(cfg: RunConfig) -> dm.NoiseSchedule:
    s = cfg.schedule
    return dm.make_schedule(s.L, s.beta_start, s.beta_end)


def make_demos(cfg: RunConfig) -> list[Demonstration]:
    d = cfg.data
    return generate_dataset(cfg.maze, d.n_success, d.n_fail, RngStream(d.seed))


def run_stage1(cfg: RunConfig, demos: list[Demonstration] | None = None, wm_cfg: WorldModelConfig | None = None) -> Stage1:
    """Generate (or reuse) demonstrations, train the world model and export latents."""
    t0 = time.perf_counter()
    demos = make_demos(cfg) if demos is None else demos
    wm_cfg = wm_cfg or cfg.world_model
    wm, curves = train_world_model(demos, cfg.maze, wm_cfg, RngStream(cfg.seeds.world_model))
    records = export_latent_dataset(wm, demos)
    return Stage1(cfg.maze, demos, wm, wm_cfg, curves, records, time.perf_counter() - t0)


def run_stage2(cfg: RunConfig, records: list[LatentRecord], wm_checksum: str, seed: int | None = None):
    seed = cfg.seeds.planner if seed is None else seed
    return train_planner(records, wm_checksum, cfg.planner, cfg.guidance, cfg.flow, RngStream(seed), schedule(cfg))


def run_eval(cfg: RunConfig, maze: MazeSpec, wm: WorldModelParams, planner: Planner, episodes: int | None = None,
             seed: int | None = None, record_trace: bool = False) -> EvalReport:
    n = cfg.seeds.episodes if episodes is None else episodes
    seed = cfg.seeds.eval if seed is None else seed
    maze = replace(maze, randomization=cfg.maze.randomization)
    return evaluate(maze, wm, PlannerPolicy(planner), planner.pcfg, n, RngStream(seed), record_trace)


def summary_row(name: str, report: EvalReport, planner: Planner, train_s: float, **extra) -> dict:
    plans = max(report.replans, 1)
    steps = max(sum(r.steps for r in report.rows), 1)
    return {
        "name": name, **extra, "episodes": report.episodes, "success_rate": report.success_rate,
        "ms_per_step": report.ms_per_step, "hl_ms_per_step": report.hl_ms / steps,
        "ll_ms_per_step": report.ll_ms / steps, "hl_nfe_per_plan": report.hl_nfe / plans,
        "ll_nfe_per_plan": report.ll_nfe / plans, "train_s": train_s, "H": planner.pcfg.H, "K": planner.pcfg.K,
    }


def component_config(cfg: RunConfig, component: str) -> RunConfig:
    """Config with one mechanism removed at both training and sampling time."""
    if component == "full":
        return cfg
    if component == "no-proj":
        return replace(cfg, guidance=replace(cfg.guidance, projection_window=None),
                       planner=replace(cfg.planner, lambda_proj=0.0))
    if component == "no-ebm":
        return replace(cfg, guidance=replace(cfg.guidance, w_ebm=0.0), planner=replace(cfg.planner, lambda_ebm=0.0))
    if component == "no-contrastive":
        wm = cfg.world_model
        return replace(cfg, world_model=replace(wm, weights=replace(wm.weights, contrastive=0.0)))
    raise ValueError(f"unknown component {component!r}")


def k_config(cfg: RunConfig, K: int) -> RunConfig:
    """Keep the planned horizon ``H * K`` fixed; replan after half a segment."""
    horizon = cfg.planner.H * cfg.planner.K
    H = max(2, int(round(horizon / K)))
    return replace(cfg, planner=replace(cfg.planner, K=int(K), H=H, replan_every=max(1, H // 2)))


def train_eval(name: str, cfg: RunConfig, s1: Stage1, episodes: int | None = None, seed: int | None = None,
               eval_seed: int | None = None, **extra):
    """Train one planner on the stage-one latents and evaluate it; returns (summary row, planner, report)."""
    t0 = time.perf_counter()
    planner, _ = run_stage2(cfg, s1.records, s1.wm.checksum(), seed)
    train_s = time.perf_counter() - t0
    report = run_eval(cfg, s1.maze, s1.wm, planner, episodes, eval_seed)
    row = summary_row(name, report, planner, train_s, **extra)
    log.info("%s: success %.3f, %.2f ms/step", name, row["success_rate"], row["ms_per_step"])
    return row, planner, report


def ablate_variants(cfg: RunConfig, s1: Stage1, variants, episodes: int | None = None) -> list[dict]:
    """Each planner variant retrained on the same latents with the same seeds."""
    return [train_eval(v, replace(cfg, planner=replace(cfg.planner, variant=v)), s1, episodes)[0] for v in variants]


def ablate_components(cfg: RunConfig, s1: Stage1, components, episodes: int | None = None) -> list[dict]:
    rows = []
    for comp in components:
        c = component_config(cfg, comp)
        stage = run_stage1(c, s1.demos) if comp == "no-contrastive" else s1
        rows.append(train_eval(comp, c, stage, episodes)[0])
    return rows


def k_sweep(cfg: RunConfig, s1: Stage1, ks=K_SWEEP, seeds=(0,), episodes: int | None = None) -> list[dict]:
    """One row per ``(K, seed)``; the seed offsets both planner training and evaluation."""
    rows = []
    for K in ks:
        c = k_config(cfg, K)
        for s in seeds:
            rows.append(train_eval(f"K={K}", c, s1, episodes, cfg.seeds.planner + s, cfg.seeds.eval + s, run=s)[0])
    return rows


def is_interior_peak(ks, rates) -> bool:
    """True when the best mean success rate over ``ks`` is not at either end."""
    rates = np.asarray(rates, dtype=np.float64)
    best = np.flatnonzero(rates == rates.max())
    return bool(rates.max() > max(rates[0], rates[-1])) and 0 < best[0] and best[-1] < len(ks) - 1
