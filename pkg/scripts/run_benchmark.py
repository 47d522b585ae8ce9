"""Desk benchmark: train the world model once, then every planner variant, component ablation and K value.

Writes one CSV per experiment into ``--out`` and prints a summary table.

    python3 scripts/run_benchmark.py --out runs/benchmark --parts variants components ksweep
"""

import argparse
import logging
import time
from pathlib import Path

from hdflow import pipeline
from hdflow import records as rc
from hdflow.config import RunConfig, load_config

PARTS = ("variants", "components", "ksweep")


def main():
    ap = argparse.ArgumentParser(description=__doc__, formatter_class=argparse.RawDescriptionHelpFormatter)
    ap.add_argument("--config", help="INI run config (defaults when omitted)")
    ap.add_argument("--out", default="runs/benchmark")
    ap.add_argument("--episodes", type=int, default=100)
    ap.add_argument("--k-episodes", type=int, default=100, help="episodes per (K, seed) in the sweep")
    ap.add_argument("--seeds", type=int, default=3, help="seeds for the K sweep")
    ap.add_argument("--parts", nargs="+", choices=PARTS, default=list(PARTS))
    args = ap.parse_args()
    logging.basicConfig(level=logging.INFO, format="%(asctime)s %(name)s %(message)s")
    logging.getLogger("hdflow.planner").setLevel(logging.WARNING)

    cfg = load_config(args.config) if args.config else RunConfig()
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    t0 = time.perf_counter()
    s1 = pipeline.run_stage1(cfg)
    rc.write_csv(out / "wm_curves.csv", s1.curves)
    logging.info("world model trained in %.1f s", s1.seconds)

    if "variants" in args.parts:
        rows = pipeline.ablate_variants(cfg, s1, ("hdflow", "fd", "hf", "hd"), args.episodes)
        rc.write_csv(out / "variants.csv", rows)
    if "components" in args.parts:
        rows = pipeline.ablate_components(cfg, s1, pipeline.COMPONENTS, args.episodes)
        rc.write_csv(out / "components.csv", rows)
    if "ksweep" in args.parts:
        rows = pipeline.k_sweep(cfg, s1, pipeline.K_SWEEP, tuple(range(args.seeds)), args.k_episodes)
        rc.write_csv(out / "ksweep.csv", rows)

    for name in ("variants", "components", "ksweep"):
        path = out / f"{name}.csv"
        if not path.exists():
            continue
        print(f"\n{name}")
        for r in rc.read_csv(path):
            tag = r["name"] + (f" run {r['run']}" if "run" in r else "")
            print(f"  {tag:<22} success {float(r['success_rate']):.2f}  {float(r['ms_per_step']):7.2f} ms/step  "
                  f"hl nfe {float(r['hl_nfe_per_plan']):5.0f}  ll nfe {float(r['ll_nfe_per_plan']):4.0f}")
    print(f"\ntotal {time.perf_counter() - t0:.0f} s")


if __name__ == "__main__":
    main()
