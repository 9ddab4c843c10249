"""Bench command line: run / sweep / pipeline / dump subcommands."""

from __future__ import annotations

import argparse
import logging
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from .bench import (
    StepReport,
    pipeline_compare,
    run_workload,
    sweep,
    write_csv,
)
from .config import EngineConfig, load_config_file
from .errors import StagecoachError
from .model import Selection
from .reader import FileReader
from .workload import WorkloadSpec


def _add_override_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="key=value config file with [workload]/[engine]/[shim] sections")
    p.add_argument("--engine", choices=["file", "staging"])
    p.add_argument("--backend", choices=["funnel", "fpp", "agg"])
    p.add_argument("--aggregators-per-node", type=int, dest="aggregators_per_node")
    p.add_argument("--codec", choices=["none", "lz4", "deflate", "zstd"])
    p.add_argument("--codec-level", type=int, dest="codec_level")
    p.add_argument("--shuffle", choices=["on", "off"])
    p.add_argument("--bb", choices=["on", "off"])
    p.add_argument("--bb-dir", dest="bb_dir")
    p.add_argument("--pfs-dir", dest="pfs_dir")
    p.add_argument("--drain", choices=["off", "async"])
    p.add_argument("--drain-rate-limit-bytes-per-sec", type=float,
                   dest="drain_rate_limit_bytes_per_sec")
    p.add_argument("--endpoint")
    p.add_argument("--steps", type=int)
    p.add_argument("--seed", type=int)
    p.add_argument("--generator", choices=["smooth", "random", "constant"])
    p.add_argument("--repeats", type=int, default=None)
    p.add_argument("--out-dir", default="bench_out")
    p.add_argument("--csv")


def _load(args) -> tuple[WorkloadSpec, EngineConfig]:
    if args.config:
        spec, cfg = load_config_file(args.config)
    else:
        spec, cfg = WorkloadSpec(), EngineConfig()
    spec_overrides = {}
    for key in ("steps", "seed", "generator"):
        v = getattr(args, key, None)
        if v is not None:
            spec_overrides[key] = v
    if spec_overrides:
        spec = replace(spec, **spec_overrides)
    cfg_overrides = {}
    for key in ("engine", "backend", "aggregators_per_node", "codec", "codec_level",
                "bb_dir", "pfs_dir", "drain", "drain_rate_limit_bytes_per_sec", "endpoint"):
        v = getattr(args, key, None)
        if v is not None:
            cfg_overrides[key] = v
    for key in ("shuffle", "bb"):
        v = getattr(args, key, None)
        if v is not None:
            cfg_overrides[key] = v == "on"
    if cfg_overrides:
        cfg = replace(cfg, **cfg_overrides)
    cfg.validate()
    return spec, cfg


def _cmd_run(args) -> int:
    spec, cfg = _load(args)
    if args.repeats:
        repeats = args.repeats
    else:
        # averaged timings want repeated runs; a staging run is one stream
        repeats = 1 if cfg.engine == "staging" else 5
    results = run_workload(spec, cfg, repeats=repeats, out_dir=args.out_dir,
                           config_id=args.config_id)
    reports: list[StepReport] = [r for res in results for r in res.reports]
    if args.csv:
        write_csv(args.csv, reports)
    for res in results:
        print(f"[{res.config_id} rep{res.repeat}] avg perceived write "
              f"{res.avg_write_s:.4f}s  raw {res.bytes_raw}  stored {res.bytes_stored}  "
              f"files {res.files_created}")
        if res.index_dir is not None:
            print(f"  index: {res.index_dir}")
    return 0


def _cmd_sweep(args) -> int:
    spec, cfg = _load(args)
    values = [v.strip() for v in args.values.split(",") if v.strip()]
    repeats = args.repeats or 5
    rows = sweep(args.param, values, spec, cfg, repeats=repeats,
                 out_dir=args.out_dir, csv_path=args.csv)
    for row in rows:
        if row["repeat"] == "avg":
            print(f"{row['config_id']:>28}: {row['perceived_write_s']:.4f}s "
                  f"(stored {row['bytes_stored']})")
    return 0


def _cmd_pipeline(args) -> int:
    spec, cfg = _load(args)
    report = pipeline_compare(spec, cfg, args.analysis_cmd, args.out_dir)
    print(f"in-situ total:  {report.in_situ_s:.3f}s")
    print(f"post-hoc total: {report.post_hoc_s:.3f}s")
    print(f"ratio:          {report.ratio:.3f}")
    return 0


def _parse_selection(text: str) -> Selection:
    starts, counts = [], []
    for dim in text.split(","):
        s, c = dim.split(":")
        starts.append(int(s))
        counts.append(int(c))
    return Selection(tuple(starts), tuple(counts))


def _cmd_dump(args) -> int:
    reader = FileReader(args.index, data_dirs=args.data_dir or None)
    if args.list:
        for d in reader.list_steps():
            names = ",".join(sorted(d.variables))
            print(f"step {d.step} complete={d.complete} vars={names} stored={d.bytes_stored}")
        return 0
    sel = _parse_selection(args.selection) if args.selection else None
    arr = reader.read_step(args.step, args.var, sel)
    if args.out:
        Path(args.out).write_bytes(arr.tobytes())
        print(f"wrote {arr.nbytes} bytes ({arr.dtype}, shape {arr.shape}) to {args.out}")
    else:
        np.set_printoptions(threshold=64)
        print(arr)
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="bench",
                                     description="synthetic step-I/O benchmark driver")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p_run = sub.add_parser("run", help="run one workload against one engine config")
    _add_override_flags(p_run)
    p_run.add_argument("--config-id", default="run")
    p_run.set_defaults(fn=_cmd_run)

    p_sweep = sub.add_parser("sweep", help="compare configurations over one parameter")
    _add_override_flags(p_sweep)
    p_sweep.add_argument("--param", required=True,
                         choices=["nodes", "aggregators_per_node", "codec", "backend",
                                  "bb", "progression"])
    p_sweep.add_argument("--values", required=True, help="comma-separated values")
    p_sweep.set_defaults(fn=_cmd_sweep)

    p_pipe = sub.add_parser("pipeline", help="in-situ vs write-then-post-process comparison")
    _add_override_flags(p_pipe)
    p_pipe.add_argument("--analysis-cmd", required=True,
                        help="consumer command; gets endpoint/index via environment")
    p_pipe.set_defaults(fn=_cmd_pipeline)

    p_dump = sub.add_parser("dump", help="dump a variable from a published index")
    p_dump.add_argument("--index", required=True)
    p_dump.add_argument("--data-dir", action="append",
                        help="extra directory holding data.<m> sub-files (repeatable)")
    p_dump.add_argument("--var")
    p_dump.add_argument("--step", type=int, default=0)
    p_dump.add_argument("--selection", help="per-dim start:count, comma separated")
    p_dump.add_argument("--out", help="write raw little-endian array bytes here")
    p_dump.add_argument("--list", action="store_true", help="list steps and variables")
    p_dump.set_defaults(fn=_cmd_dump)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(
        level=logging.DEBUG if args.verbose else logging.WARNING,
        format="%(asctime)s %(name)s %(levelname)s %(message)s",
    )
    try:
        return args.fn(args)
    except StagecoachError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
