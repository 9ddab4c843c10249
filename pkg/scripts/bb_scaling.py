#!/usr/bin/env python3
"""Burst-buffer write scaling over synthetic node counts.

Fixed total problem size; each added node brings its own burst-buffer
bandwidth, so perceived write time should fall like 1/n.

    python scripts/bb_scaling.py --nodes 1,2,4 --bb-rate-mb 50
"""

import argparse
import tempfile

from stagecoach import EngineConfig, WorkloadSpec
from stagecoach.bench import run_workload, spec_for_nodes

MB = 1_000_000


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--nodes", default="1,2,4")
    ap.add_argument("--bb-rate-mb", type=float, default=50.0)
    ap.add_argument("--repeats", type=int, default=3)
    ap.add_argument("--out-dir", default=None)
    args = ap.parse_args()

    base = WorkloadSpec(nx=384, ny=384, nz=16, n_3d_fields=4, n_2d_fields=2,
                        steps=2, px=2, py=2, nodes=1, ranks_per_node=4,
                        generator="constant", seed=30)
    cfg = EngineConfig(bb=True, drain="off",
                       bb_rate_bytes_per_sec=args.bb_rate_mb * MB,
                       pfs_rate_bytes_per_sec=200 * MB,
                       fabric_rate_bytes_per_sec=200 * MB,
                       aggregators_per_node=1)
    out_dir = args.out_dir or tempfile.mkdtemp(prefix="sc-bbscale-")

    node_counts = [int(n) for n in args.nodes.split(",")]
    t1 = None
    print(f"{'nodes':>6} {'write [s]':>10} {'speedup':>8} {'ideal':>6}")
    for n in node_counts:
        spec = spec_for_nodes(base, n)
        results = run_workload(spec, cfg, repeats=args.repeats,
                               out_dir=out_dir, config_id=f"n{n}")
        avg = sum(r.avg_write_s for r in results) / len(results)
        t1 = t1 if t1 is not None else avg * n / node_counts[0]
        print(f"{n:>6} {avg:>10.3f} {t1 / avg:>7.2f}X {n:>5}X")


if __name__ == "__main__":
    main()
