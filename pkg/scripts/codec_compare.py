#!/usr/bin/env python3
"""Write time and output size across the in-line compression codecs.

    python scripts/codec_compare.py --shuffle on
"""

import argparse
import tempfile

from stagecoach import EngineConfig, WorkloadSpec
from stagecoach.bench import sweep

MB = 1_000_000


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--codecs", default="none,lz4,deflate,zstd")
    ap.add_argument("--shuffle", choices=["on", "off"], default="on")
    ap.add_argument("--repeats", type=int, default=3)
    ap.add_argument("--csv", default="codecs.csv")
    ap.add_argument("--out-dir", default=None)
    args = ap.parse_args()

    spec = WorkloadSpec(nx=256, ny=256, nz=16, n_3d_fields=4, n_2d_fields=2,
                        steps=2, px=4, py=2, nodes=2, ranks_per_node=4,
                        generator="smooth", seed=40)
    cfg = EngineConfig(pfs_rate_bytes_per_sec=200 * MB,
                       bb_rate_bytes_per_sec=1000 * MB,
                       fabric_rate_bytes_per_sec=200 * MB,
                       shuffle=args.shuffle == "on",
                       aggregators_per_node=1)
    out_dir = args.out_dir or tempfile.mkdtemp(prefix="sc-codec-")
    rows = sweep("codec", args.codecs.split(","), spec, cfg,
                 repeats=args.repeats, out_dir=out_dir, csv_path=args.csv)
    print(f"{'codec':>18} {'write [s]':>10} {'stored [MB]':>12} {'ratio':>6}")
    for r in rows:
        if r["repeat"] != "avg":
            continue
        ratio = r["bytes_raw"] / r["bytes_stored"] if r["bytes_stored"] else 1.0
        print(f"{r['config_id']:>18} {r['perceived_write_s']:>10.3f} "
              f"{r['bytes_stored'] / 1e6:>12.2f} {ratio:>6.2f}")
    print(f"rows written to {args.csv}")


if __name__ == "__main__":
    main()
