"""Command-line entry point: ``hdflow <command> [options]``.

Exit codes: 0 success, 2 usage or invalid configuration, 3 file I/O or format
error, 4 incompatible components (world-model checksum mismatch), 5 training
or sampling divergence.

CSV schemas
  eval          task, randomization, seed, episode, success, steps, hl_ms, ll_ms, hl_nfe, ll_nfe
  ablate        name, [run,] episodes, success_rate, ms_per_step, hl_ms_per_step, ll_ms_per_step,
                hl_nfe_per_plan, ll_nfe_per_plan, train_s, H, K
  gap-analysis  d, l, alpha_bar, delta_ebm, stderr
  loss curves   world model: epoch, recon, kl, wm, idm, contrastive, total;
                planner: hl, ll, ebm, proj (the active terms), iteration
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import gap, pipeline, plots
from . import records as rc
from .config import ConfigError, RunConfig, load_config, render_config
from .core import RngStream
from .maze import MazeError, MazeSpec, generate_dataset
from .neural import CheckpointError, NonFiniteGradientError
from .planner import VARIANTS, IncompatibleComponentsError
from .world_model import DivergenceError, export_latent_dataset

EXIT_OK, EXIT_USAGE, EXIT_IO, EXIT_INCOMPATIBLE, EXIT_DIVERGED = 0, 2, 3, 4, 5
OUT_ENV = "HDFLOW_OUT"

log = logging.getLogger("hdflow")


class UsageError(Exception):
    pass


def _out_dir(cfg: RunConfig) -> Path:
    return Path(os.environ.get(OUT_ENV, cfg.seeds.out_dir))


def _out(args, cfg: RunConfig, default: str) -> Path:
    return Path(args.out) if args.out else _out_dir(cfg) / default


def _config(args) -> RunConfig:
    if getattr(args, "config", None):
        return load_config(args.config)
    cfg = RunConfig()
    if getattr(args, "echo_config", False):
        print("# no --config given; using defaults")
        print(render_config(cfg))
    return cfg


def _sibling(path: Path, suffix: str) -> Path:
    return path.with_name(path.stem + suffix)


def cmd_gen_data(args) -> None:
    cfg = _config(args)
    maze = cfg.maze if args.maze in (None, cfg.maze.maze_id) else _maze_by_name(args.maze)
    n_s = cfg.data.n_success if args.n_success is None else args.n_success
    n_f = cfg.data.n_fail if args.n_fail is None else args.n_fail
    if n_s < 0 or n_f < 0 or n_s + n_f == 0:
        raise UsageError("need a non-negative number of demonstrations, at least one in total")
    seed = cfg.data.seed if args.seed is None else args.seed
    demos = generate_dataset(maze, n_s, n_f, RngStream(seed))
    out = _out(args, cfg, "demos.jsonl")
    rc.save_demos(demos, maze, out)
    for label, ok in (("success", True), ("fail", False)):
        lens = [d.T for d in demos if d.success == ok]
        print(f"{label}: {len(lens)} demos, mean length {np.mean(lens) if lens else 0:.1f}")
    print(f"wrote {out}")


def _maze_by_name(name: str) -> MazeSpec:
    if name == MazeSpec().maze_id:
        return MazeSpec()
    raise UsageError(f"unknown maze {name!r}; use --config to supply a layout")


def cmd_train_wm(args) -> None:
    cfg = _config(args)
    demos, maze = rc.load_demos(args.data)
    cfg = replace(cfg, maze=maze)
    s1 = pipeline.run_stage1(cfg, demos)
    out = _out(args, cfg, "wm.zip")
    rc.save_world_model(s1.wm, s1.wm_cfg, out)
    rc.write_csv(_sibling(out, "_curves.csv"), s1.curves)
    last = s1.curves[-1]
    print(f"world model {s1.wm.checksum()[:12]}: final recon {last['recon']:.4f}, total {last['total']:.4f}")
    print(f"wrote {out}")


def cmd_export(args) -> None:
    wm, _ = rc.load_world_model(args.wm)
    demos, _ = rc.load_demos(args.data)
    out = Path(args.out) if args.out else _out_dir(RunConfig()) / "latents.jsonl"
    rc.save_latents(export_latent_dataset(wm, demos), wm.checksum(), out)
    print(f"wrote {out}")


def cmd_train_planner(args) -> None:
    cfg = _config(args)
    if args.variant:
        cfg = replace(cfg, planner=replace(cfg.planner, variant=args.variant))
    expected = None
    if args.wm:
        wm, _ = rc.load_world_model(args.wm)
        expected = wm.checksum()
    records, checksum = rc.load_latents(args.latents, expected)
    planner, curves = pipeline.run_stage2(cfg, records, checksum)
    out = _out(args, cfg, f"planner_{cfg.planner.variant}.zip")
    rc.save_planner(planner, out)
    rc.write_csv(_sibling(out, "_curves.csv"), curves)
    print(f"planner {cfg.planner.variant}: final losses " + ", ".join(
        f"{k} {v:.4f}" for k, v in curves[-1].items() if k != "iteration"))
    print(f"wrote {out}")


def cmd_eval(args) -> None:
    cfg = _config(args)
    wm, _ = rc.load_world_model(args.wm)
    planner = rc.load_planner(args.components, wm.checksum())
    if args.randomization:
        cfg = replace(cfg, maze=replace(cfg.maze, randomization=args.randomization))
    seed = cfg.seeds.eval if args.seed is None else args.seed
    report = pipeline.run_eval(cfg, cfg.maze, wm, planner, args.episodes, seed, record_trace=bool(args.trace))
    out = _out(args, cfg, "eval.csv")
    rc.write_csv(out, rc.eval_rows(report, cfg.maze.maze_id, cfg.maze.randomization, seed), rc.EVAL_COLUMNS)
    if args.trace:
        lines = [json.dumps({"episode": r.episode, **step}) for r in report.rows for step in r.trace]
        rc.write_atomic(args.trace, ("\n".join(lines) + "\n").encode())
    print(f"{'variant':>8} {'episodes':>8} {'success':>8} {'ms/step':>8} {'hl_nfe':>8} {'ll_nfe':>8}")
    print(f"{planner.variant:>8} {report.episodes:>8d} {report.success_rate:>8.3f} {report.ms_per_step:>8.2f} "
          f"{report.hl_nfe:>8d} {report.ll_nfe:>8d}")
    print(f"wrote {out}")


def cmd_ablate(args) -> None:
    cfg = _config(args)
    if args.episodes is not None:
        cfg = replace(cfg, seeds=replace(cfg.seeds, episodes=args.episodes))
    wm, wm_cfg = rc.load_world_model(args.wm)
    records, _ = rc.load_latents(args.latents, wm.checksum())
    demos = rc.load_demos(args.data)[0] if args.data else None
    s1 = pipeline.Stage1(cfg.maze, demos, wm, wm_cfg, [], records, 0.0)
    if args.variant:
        rows = pipeline.ablate_variants(cfg, s1, args.variant)
    elif args.k_sweep:
        rows = pipeline.k_sweep(cfg, s1, args.k_sweep, tuple(range(args.seeds)))
    else:
        if "no-contrastive" in args.component and demos is None:
            raise UsageError("--component no-contrastive retrains the world model and needs --data")
        rows = pipeline.ablate_components(cfg, s1, args.component)
    out = _out(args, cfg, "ablation.csv")
    rc.write_csv(out, rows)
    for r in rows:
        print(f"{r['name']:>16} success {r['success_rate']:.3f}  ms/step {r['ms_per_step']:.2f}  "
              f"hl_nfe/plan {r['hl_nfe_per_plan']:.0f}  ll_nfe/plan {r['ll_nfe_per_plan']:.0f}")
    print(f"wrote {out}")


def cmd_gap(args) -> None:
    cfg = _config(args)
    rows, slope = gap.guidance_gap_experiment(args.dims, args.steps, pipeline.schedule(cfg), RngStream(args.seed),
                                              n_samples=args.samples)
    out = _out(args, cfg, "gap.csv")
    gap.write_gap_csv(rows, out)
    print(f"fitted log-log slope of gap against d: {slope:.4f}")
    print(f"wrote {out}")


def cmd_plot(args) -> None:
    out = Path(args.out) if args.out else Path(args.input).with_suffix(".svg")
    if args.kind == "trajectory":
        steps = plots.read_trace(args.input)
        ep = args.episode if args.episode is not None else steps[0].get("episode", 0)
        sel = [s for s in steps if s.get("episode", 0) == ep]
        if not sel:
            raise rc.DataFormatError(f"{args.input}: no steps for episode {ep}")
        maze = load_config(args.config).maze if args.config else MazeSpec()
        plots.plot_trajectory(maze, sel, out)
    elif args.kind == "losses":
        plots.plot_losses(args.input, out)
    elif args.kind == "gap":
        plots.plot_gap(args.input, out)
    else:
        plots.plot_ablation(args.input, out)
    print(f"wrote {out}")


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="hdflow", description=__doc__, formatter_class=argparse.RawDescriptionHelpFormatter)
    p.add_argument("-v", "--verbose", action="store_true", help="log training progress")
    sub = p.add_subparsers(dest="command", required=True)

    def add(name, fn, help_):
        sp = sub.add_parser(name, help=help_, description=help_)
        sp.set_defaults(fn=fn)
        sp.add_argument("--config", help="INI run configuration (defaults when omitted)")
        sp.add_argument("--out", help=f"output path (default under ${OUT_ENV} or the configured out_dir)")
        return sp

    sp = add("gen-data", cmd_gen_data, "generate scripted demonstrations")
    sp.add_argument("--maze", help="maze id (default: the configured maze)")
    sp.add_argument("--n-success", type=int)
    sp.add_argument("--n-fail", type=int)
    sp.add_argument("--seed", type=int)

    sp = add("train-wm", cmd_train_wm, "train the world model; writes a checkpoint and <out>_curves.csv")
    sp.add_argument("--data", required=True)
    sp.set_defaults(echo_config=True)

    sp = add("export", cmd_export, "export posterior-mean latents of a dataset")
    sp.add_argument("--wm", required=True)
    sp.add_argument("--data", required=True)

    sp = add("train-planner", cmd_train_planner, "train the planner on exported latents")
    sp.add_argument("--latents", required=True)
    sp.add_argument("--wm", help="world-model checkpoint the latents must match")
    sp.add_argument("--variant", choices=VARIANTS)
    sp.set_defaults(echo_config=True)

    sp = add("eval", cmd_eval, "closed-loop evaluation; writes one CSV row per episode")
    sp.add_argument("--components", required=True, help="planner checkpoint")
    sp.add_argument("--wm", required=True, help="world-model checkpoint")
    sp.add_argument("--episodes", type=int)
    sp.add_argument("--randomization", choices=("low", "med", "high"))
    sp.add_argument("--seed", type=int)
    sp.add_argument("--trace", help="write a per-step JSON-lines trace here")

    sp = add("ablate", cmd_ablate, "compare planner variants, subgoal counts or removed components")
    sp.add_argument("--wm", required=True)
    sp.add_argument("--latents", required=True)
    sp.add_argument("--data", help="demonstrations (needed to retrain the world model)")
    sp.add_argument("--episodes", type=int)
    sp.add_argument("--seeds", type=int, default=1, help="seeds per K in a sweep")
    grp = sp.add_mutually_exclusive_group(required=True)
    grp.add_argument("--variant", nargs="+", choices=VARIANTS)
    grp.add_argument("--k-sweep", nargs="+", type=int)
    grp.add_argument("--component", nargs="+", choices=pipeline.COMPONENTS)

    sp = add("gap-analysis", cmd_gap, "Monte Carlo guidance-gap scaling experiment")
    sp.add_argument("--dims", nargs="+", type=int, default=[4, 16, 64, 256])
    sp.add_argument("--steps", nargs="+", type=int, default=[50, 100, 200, 400, 800])
    sp.add_argument("--samples", type=int, default=100_000)
    sp.add_argument("--seed", type=int, default=0)

    sp = add("plot", cmd_plot, "render an SVG figure from a CSV or trace file")
    sp.add_argument("--input", required=True)
    sp.add_argument("--kind", required=True, choices=plots.KINDS)
    sp.add_argument("--episode", type=int, help="episode to draw from a trace")
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    try:
        args.fn(args)
    except (UsageError, ConfigError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except IncompatibleComponentsError as exc:
        print(f"incompatible components: {exc}", file=sys.stderr)
        return EXIT_INCOMPATIBLE
    except (DivergenceError, NonFiniteGradientError, FloatingPointError, gap.MonteCarloPrecisionError) as exc:
        print(f"diverged: {exc}", file=sys.stderr)
        return EXIT_DIVERGED
    except (OSError, rc.DataFormatError, CheckpointError) as exc:
        print(f"I/O error: {exc}", file=sys.stderr)
        return EXIT_IO
    except (MazeError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
