#!/usr/bin/env python3
"""Time-to-solution: in-situ streamed analysis vs write-then-post-process.

The built-in slice-statistics consumer plays the analysis stage; swap in any
command that honors STAGECOACH_ENDPOINT / STAGECOACH_INDEX.

    python scripts/insitu_pipeline.py --steps 8 --compute-s 1.0 --analysis-s 0.5
"""

import argparse
import sys
import tempfile

from stagecoach import EngineConfig, WorkloadSpec
from stagecoach.bench import pipeline_compare

MB = 1_000_000


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--steps", type=int, default=8)
    ap.add_argument("--compute-s", type=float, default=1.0)
    ap.add_argument("--analysis-s", type=float, default=0.5)
    ap.add_argument("--analysis-cmd", default=None)
    ap.add_argument("--out-dir", default=None)
    args = ap.parse_args()

    spec = WorkloadSpec(nx=128, ny=128, nz=16, n_3d_fields=6, n_2d_fields=2,
                        steps=args.steps,
                        compute_ms_per_step=args.compute_s * 1000,
                        px=2, py=2, nodes=1, ranks_per_node=4,
                        generator="smooth", seed=60)
    cfg = EngineConfig(pfs_rate_bytes_per_sec=200 * MB,
                       bb_rate_bytes_per_sec=1000 * MB,
                       fabric_rate_bytes_per_sec=200 * MB)
    analysis = args.analysis_cmd or (
        f"{sys.executable} -m stagecoach.analysis_stub "
        f"--field T --k 0 --sleep-per-step {args.analysis_s}"
    )
    out_dir = args.out_dir or tempfile.mkdtemp(prefix="sc-pipe-")
    report = pipeline_compare(spec, cfg, analysis, out_dir)
    print(f"in-situ (staging) total: {report.in_situ_s:8.2f} s")
    print(f"post-hoc (files)  total: {report.post_hoc_s:8.2f} s")
    print(f"time-to-solution ratio:  {report.ratio:8.2f}")


if __name__ == "__main__":
    main()
