"""Minimal analysis consumer used by the pipeline comparison.

Reads a 2D slice of one field per step — live from a staging endpoint or
post-hoc from a published index — prints slice statistics, and optionally
simulates analysis cost with a per-step sleep.

    python -m stagecoach.analysis_stub --mode staging --endpoint host:port
    python -m stagecoach.analysis_stub --mode files --index <dir>

Mode, endpoint, and index fall back to STAGECOACH_MODE / STAGECOACH_ENDPOINT /
STAGECOACH_INDEX so it can be launched with no arguments by the bench.
"""

from __future__ import annotations

import argparse
import os
import sys
import time

import numpy as np

from .model import Selection
from .reader import FileReader
from .staging import StagingConsumer


def _slice_selection(var, k: int) -> Selection | None:
    if var.ndim == 3:
        nz, ny, nx = var.global_shape
        return Selection((min(k, nz - 1), 0, 0), (1, ny, nx))
    return None  # whole array for 2D/1D


def _stats_line(step: int, name: str, arr: np.ndarray) -> str:
    a = np.asarray(arr, dtype=np.float64)
    return (f"step={step} field={name} min={a.min():.6f} "
            f"max={a.max():.6f} mean={a.mean():.6f}")


def _pick_field(names, wanted: str | None) -> str:
    if wanted:
        if wanted not in names:
            raise SystemExit(f"field {wanted!r} not present; have {sorted(names)}")
        return wanted
    for name in names:
        if name != "XTIME":
            return name
    return names[0]


def run_staging(endpoint: str, fieldname: str | None, k: int, sleep_s: float) -> int:
    with StagingConsumer(endpoint) as consumer:
        while True:
            step = consumer.begin_step()
            if step is None:
                return 0
            names = consumer.available_variables()
            name = _pick_field(names, fieldname)
            var = step.variables[name]
            arr = consumer.get(name, _slice_selection(var, k))
            print(_stats_line(step.step, name, arr), flush=True)
            if sleep_s:
                time.sleep(sleep_s)
            consumer.end_step()


def run_files(index_dir: str, fieldname: str | None, k: int, sleep_s: float) -> int:
    reader = FileReader(index_dir)
    for desc in reader.list_steps():
        names = sorted(desc.variables)
        name = _pick_field(names, fieldname)
        var = reader.variable(name)
        arr = reader.read_step(desc.step, name, _slice_selection(var, k))
        print(_stats_line(desc.step, name, arr), flush=True)
        if sleep_s:
            time.sleep(sleep_s)
    return 0


def main(argv=None) -> int:
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--mode", choices=["staging", "files"],
                    default=os.environ.get("STAGECOACH_MODE"))
    ap.add_argument("--endpoint", default=os.environ.get("STAGECOACH_ENDPOINT"))
    ap.add_argument("--index", default=os.environ.get("STAGECOACH_INDEX"))
    ap.add_argument("--field", default=None)
    ap.add_argument("--k", type=int, default=0, help="z index of the analyzed slice")
    ap.add_argument("--sleep-per-step", type=float, default=0.0)
    args = ap.parse_args(argv)

    if args.mode == "staging" or (args.mode is None and args.endpoint):
        if not args.endpoint:
            ap.error("--endpoint (or STAGECOACH_ENDPOINT) required for staging mode")
        return run_staging(args.endpoint, args.field, args.k, args.sleep_per_step)
    if not args.index:
        ap.error("--index (or STAGECOACH_INDEX) required for files mode")
    return run_files(args.index, args.field, args.k, args.sleep_per_step)


if __name__ == "__main__":
    sys.exit(main())
