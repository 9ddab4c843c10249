#!/usr/bin/env python3
"""Progression of optimizations: funnel -> agg -> agg+bb -> agg+bb+zstd.

Runs the four write-path configurations over the same workload under the
throttled filesystem shim and reports average perceived write times.

    python scripts/table1_progression.py --out-dir /tmp/prog --repeats 5
"""

import argparse
import tempfile

from stagecoach import EngineConfig, WorkloadSpec
from stagecoach.bench import sweep

MB = 1_000_000
STAGES = ["funnel", "agg", "agg+bb", "agg+bb+zstd"]


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--out-dir", default=None)
    ap.add_argument("--repeats", type=int, default=5)
    ap.add_argument("--csv", default="progression.csv")
    ap.add_argument("--plot", default=None, help="write a bar chart PNG here")
    args = ap.parse_args()

    spec = WorkloadSpec(nx=512, ny=512, nz=16, n_3d_fields=5, n_2d_fields=2,
                        steps=2, px=4, py=2, nodes=2, ranks_per_node=4,
                        generator="constant", seed=20)
    cfg = EngineConfig(pfs_rate_bytes_per_sec=200 * MB,
                       bb_rate_bytes_per_sec=1000 * MB,
                       fabric_rate_bytes_per_sec=200 * MB,
                       aggregators_per_node=1)

    out_dir = args.out_dir or tempfile.mkdtemp(prefix="sc-prog-")
    rows = sweep("progression", STAGES, spec, cfg, repeats=args.repeats,
                 out_dir=out_dir, csv_path=args.csv)
    avg = {r["config_id"].split("=")[1]: r["perceived_write_s"]
           for r in rows if r["repeat"] == "avg"}
    base = avg[STAGES[0]]
    print(f"{'configuration':>14} {'write [s]':>10} {'speedup':>8}")
    for stage in STAGES:
        print(f"{stage:>14} {avg[stage]:>10.3f} {base / avg[stage]:>7.1f}X")
    print(f"rows written to {args.csv}")

    if args.plot:
        import matplotlib
        matplotlib.use("Agg")
        import matplotlib.pyplot as plt
        fig, ax = plt.subplots(figsize=(6, 3.5))
        ax.bar(STAGES, [avg[s] for s in STAGES], color="#33688e")
        ax.set_ylabel("avg perceived write time [s]")
        ax.set_yscale("log")
        fig.tight_layout()
        fig.savefig(args.plot, dpi=150)
        print(f"chart written to {args.plot}")


if __name__ == "__main__":
    main()
