"""Experiment driver: run synthetic workloads against a configured engine,
time the write phase, and emit CSV/plot-ready reports."""

from __future__ import annotations

import csv
import logging
import math
import os
import shlex
import struct
import subprocess
import threading
import time
from dataclasses import dataclass, field, replace
from pathlib import Path

from .burst import BurstManager
from .codecs import OperatorSpec, OperatorTable
from .config import (
    BACKEND_AGG,
    BACKEND_FPP,
    BACKEND_FUNNEL,
    ENGINE_STAGING,
    ENDPOINT_ENV,
    EngineConfig,
)
from .engine import FileWriteEngine
from .errors import ConfigError, ConsumerLaunchFailure
from .shim import RateLimiter, StorageTarget
from .staging import StagingEngine
from .topology import (
    RankTopology,
    assign_aggregators,
    fpp_assignment,
    funnel_assignment,
)
from .workload import StepFieldCache, WorkloadSpec, patch_for_rank

log = logging.getLogger(__name__)

CSV_COLUMNS = ["config_id", "repeat", "step", "perceived_write_s",
               "bytes_raw", "bytes_stored", "drain_s"]

INDEX_ENV = "STAGECOACH_INDEX"
MODE_ENV = "STAGECOACH_MODE"


@dataclass
class StepReport:
    config_id: str
    repeat: int
    step: int
    perceived_write_s: float
    bytes_raw: int
    bytes_stored: int
    drain_s: float = 0.0

    def row(self) -> list:
        return [self.config_id, self.repeat, self.step,
                f"{self.perceived_write_s:.6f}", self.bytes_raw, self.bytes_stored,
                f"{self.drain_s:.6f}"]


@dataclass
class RunResult:
    config_id: str
    repeat: int
    reports: list[StepReport]
    files_created: int
    bytes_raw: int
    bytes_stored: int
    index_dir: Path | None
    data_dirs: list[Path]
    wall_s: float
    pfs_dir: Path | None = None
    burst_summary: object = None
    dropped_steps: list[int] = field(default_factory=list)

    @property
    def avg_write_s(self) -> float:
        if not self.reports:
            return 0.0
        return sum(r.perceived_write_s for r in self.reports) / len(self.reports)


def factor_near_square(n: int) -> tuple[int, int]:
    """(px, py) with px*py = n and px the largest divisor <= sqrt(n)."""
    px = 1
    for d in range(1, int(math.isqrt(n)) + 1):
        if n % d == 0:
            px = d
    return px, n // px


def spec_for_nodes(spec: WorkloadSpec, nodes: int) -> WorkloadSpec:
    px, py = factor_near_square(nodes * spec.ranks_per_node)
    return replace(spec, nodes=nodes, px=px, py=py)


# -- engine construction ----------------------------------------------------------


@dataclass
class _RunContext:
    engine: object
    index_dir: Path | None
    data_dirs: list[Path]
    is_staging: bool
    burst: BurstManager | None
    pfs_dir: Path | None = None


def _build_assignment(spec: WorkloadSpec, cfg: EngineConfig, topology: RankTopology):
    if cfg.backend == BACKEND_FUNNEL:
        return funnel_assignment(topology), True
    if cfg.backend == BACKEND_FPP:
        return fpp_assignment(topology), False
    return assign_aggregators(topology, cfg.aggregators_per_node), False


def _operator_table(cfg: EngineConfig) -> OperatorTable:
    default = OperatorSpec.from_names(cfg.codec, cfg.codec_level, cfg.shuffle)
    per_var = {
        name: OperatorSpec.from_names(codec, cfg.codec_level, cfg.shuffle)
        for name, codec in cfg.per_var_codecs.items()
    }
    return OperatorTable(default, per_var)


def build_engine(spec: WorkloadSpec, cfg: EngineConfig, run_dir: Path) -> _RunContext:
    cfg.validate()
    run_dir = Path(run_dir)
    if cfg.engine == ENGINE_STAGING:
        engine = StagingEngine(
            cfg.resolved_endpoint(),
            world_size=spec.world_size,
            operators=_operator_table(cfg),
            max_steps=cfg.max_steps,
            policy=cfg.queue_policy,
        )
        return _RunContext(engine, None, [], True, None, None)

    topology = RankTopology.uniform(spec.nodes, spec.ranks_per_node)
    assignment, gather = _build_assignment(spec, cfg, topology)
    fabric = RateLimiter(cfg.fabric_rate_bytes_per_sec) if cfg.fabric_rate_bytes_per_sec else None
    pfs_dir = Path(cfg.pfs_dir) if cfg.pfs_dir else run_dir / "pfs"
    pfs_limiter = RateLimiter(cfg.pfs_rate_bytes_per_sec) if cfg.pfs_rate_bytes_per_sec else None
    pfs_target = StorageTarget(pfs_dir, pfs_limiter, "pfs").ensure()

    if cfg.bb:
        bb_root = Path(cfg.bb_dir) if cfg.bb_dir else run_dir / "bb"
        node_targets = {}
        for n in range(spec.nodes):
            limiter = RateLimiter(cfg.bb_rate_bytes_per_sec) if cfg.bb_rate_bytes_per_sec else None
            node_targets[n] = StorageTarget(bb_root / f"node{n}", limiter, f"bb{n}").ensure()
        burst = BurstManager(
            pfs_target, drain=cfg.drain,
            drain_rate_limit=cfg.drain_rate_limit_bytes_per_sec,
        )
        index_dir = node_targets[0].root
        engine = FileWriteEngine(
            topology, assignment,
            data_target=pfs_target, node_targets=node_targets, index_dir=index_dir,
            operators=_operator_table(cfg), fabric=fabric, gather=gather, burst=burst,
        )
        data_dirs = [t.root for t in node_targets.values()]
        return _RunContext(engine, index_dir, data_dirs, False, burst, pfs_dir)

    engine = FileWriteEngine(
        topology, assignment,
        data_target=pfs_target, index_dir=pfs_dir,
        operators=_operator_table(cfg), fabric=fabric, gather=gather,
    )
    return _RunContext(engine, pfs_dir, [pfs_dir], False, None, pfs_dir)


# -- the drive loop ------------------------------------------------------------------


def _rank_body(spec, stream, cache, times, errors, rank):
    try:
        defs = spec.field_defs()
        for name, dt, shape in defs:
            stream.declare_variable(name, dt, shape)
        for step in range(spec.steps):
            # the model "computes" its fields, then blocks on the write call;
            # only the put/end_step window counts as perceived write time
            payloads = {}
            for name, dt, shape in defs:
                if shape != ():
                    sel = patch_for_rank(spec, rank, shape)
                    payloads[name] = (cache.patch_bytes(name, shape, step, sel), sel)
            if spec.compute_ms_per_step:
                time.sleep(spec.compute_ms_per_step / 1000.0)
            t0 = time.perf_counter()
            stream.begin_step()
            for name, dt, shape in defs:
                if shape == ():
                    if rank == 0:
                        stream.put(name, struct.pack("<d", step * 30.0))
                    continue
                payload, sel = payloads[name]
                stream.put(name, payload, sel)
            stream.end_step()
            times[rank][step] = time.perf_counter() - t0
        stream.close()
    except Exception as exc:  # surfaced after join
        errors.append((rank, exc))


def drive_ranks(spec: WorkloadSpec, engine) -> list[list[float]]:
    """Run every rank's write loop on its own worker; returns per-rank step times."""
    cache = StepFieldCache(spec)
    times = [[0.0] * spec.steps for _ in range(spec.world_size)]
    errors: list[tuple[int, Exception]] = []
    threads = [
        threading.Thread(
            target=_rank_body,
            args=(spec, engine.stream(rank), cache, times, errors, rank),
            name=f"rank-{rank}", daemon=True,
        )
        for rank in range(spec.world_size)
    ]
    for t in threads:
        t.start()
    for t in threads:
        t.join()
    if errors:
        raise errors[0][1]
    return times


def run_workload(
    spec: WorkloadSpec,
    cfg: EngineConfig,
    repeats: int = 1,
    out_dir=None,
    config_id: str = "run",
    staging_close_timeout: float | None = None,
) -> list[RunResult]:
    """Execute the workload ``repeats`` times; deterministic data from the seed."""
    out_dir = Path(out_dir) if out_dir else Path.cwd() / "bench_out"
    results = []
    for rep in range(repeats):
        run_dir = out_dir / config_id / f"rep{rep}"
        run_dir.mkdir(parents=True, exist_ok=True)
        ctx = build_engine(spec, cfg, run_dir)
        t_start = time.perf_counter()
        try:
            times = drive_ranks(spec, ctx.engine)
        finally:
            if ctx.is_staging:
                ctx.engine.close(timeout=staging_close_timeout)
                summary = None
            else:
                summary = ctx.engine.close()
        wall = time.perf_counter() - t_start

        step_stats = (ctx.engine.step_stats if ctx.is_staging
                      else ctx.engine.committer.step_stats)
        drain_per_step = summary.drain_s_per_step if summary is not None else {}
        reports = []
        for step in range(spec.steps):
            perceived = max(times[r][step] for r in range(spec.world_size))
            raw, stored = step_stats.get(step, (0, 0))
            reports.append(StepReport(
                config_id, rep, step, perceived, raw, stored,
                drain_per_step.get(step, 0.0),
            ))
        files = sum(
            1 for d in ctx.data_dirs for p in d.glob("data.*") if p.is_file()
        )
        results.append(RunResult(
            config_id=config_id,
            repeat=rep,
            reports=reports,
            files_created=files,
            bytes_raw=ctx.engine.totals.bytes_raw,
            bytes_stored=ctx.engine.totals.bytes_stored,
            index_dir=ctx.index_dir,
            data_dirs=ctx.data_dirs,
            wall_s=wall,
            pfs_dir=ctx.pfs_dir,
            burst_summary=summary,
            dropped_steps=list(ctx.engine.queue.dropped_steps) if ctx.is_staging else [],
        ))
    return results


# -- sweeps -----------------------------------------------------------------------


SWEEP_PARAMS = ("nodes", "aggregators_per_node", "codec", "backend", "bb", "progression")

_PROGRESSION_PRESETS = {
    "funnel": dict(backend=BACKEND_FUNNEL, bb=False, codec="none"),
    "agg": dict(backend=BACKEND_AGG, bb=False, codec="none"),
    "agg+bb": dict(backend=BACKEND_AGG, bb=True, codec="none"),
    "agg+bb+zstd": dict(backend=BACKEND_AGG, bb=True, codec="zstd"),
    "agg+bb+lz4": dict(backend=BACKEND_AGG, bb=True, codec="lz4"),
    "agg+bb+deflate": dict(backend=BACKEND_AGG, bb=True, codec="deflate"),
}


def apply_sweep_value(spec: WorkloadSpec, cfg: EngineConfig, param: str, value):
    if param == "nodes":
        return spec_for_nodes(spec, int(value)), cfg
    if param == "aggregators_per_node":
        return spec, replace(cfg, aggregators_per_node=int(value))
    if param == "codec":
        return spec, replace(cfg, codec=str(value))
    if param == "backend":
        return spec, replace(cfg, backend=str(value))
    if param == "bb":
        on = str(value).lower() in ("on", "true", "1", "yes")
        return spec, replace(cfg, bb=on)
    if param == "progression":
        preset = _PROGRESSION_PRESETS.get(str(value))
        if preset is None:
            raise ConfigError(f"unknown progression stage {value!r}")
        return spec, replace(cfg, **preset)
    raise ConfigError(f"sweep parameter must be one of {SWEEP_PARAMS}, got {param!r}")


def sweep(
    param: str,
    values,
    spec: WorkloadSpec,
    cfg: EngineConfig,
    repeats: int = 5,
    out_dir=None,
    csv_path=None,
) -> list[dict]:
    """One row per value per repeat plus an averaged row per value."""
    rows = []
    for value in values:
        vspec, vcfg = apply_sweep_value(spec, cfg, param, value)
        config_id = f"{param}={value}"
        results = run_workload(vspec, vcfg, repeats=repeats, out_dir=out_dir,
                               config_id=config_id)
        for res in results:
            rows.append({
                "config_id": config_id, "repeat": res.repeat, "step": "all",
                "perceived_write_s": res.avg_write_s,
                "bytes_raw": res.bytes_raw, "bytes_stored": res.bytes_stored,
                "drain_s": sum(r.drain_s for r in res.reports),
            })
        rows.append({
            "config_id": config_id, "repeat": "avg", "step": "all",
            "perceived_write_s": sum(r.avg_write_s for r in results) / len(results),
            "bytes_raw": results[0].bytes_raw, "bytes_stored": results[0].bytes_stored,
            "drain_s": sum(sum(r.drain_s for r in res.reports) for res in results) / len(results),
        })
    if csv_path:
        write_csv(csv_path, rows)
    return rows


def write_csv(path, rows) -> None:
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(CSV_COLUMNS)
        for r in rows:
            if isinstance(r, StepReport):
                w.writerow(r.row())
            else:
                w.writerow([r[c] for c in CSV_COLUMNS])


# -- pipeline comparison ---------------------------------------------------------


@dataclass
class PipelineReport:
    in_situ_s: float
    post_hoc_s: float

    @property
    def ratio(self) -> float:
        return self.in_situ_s / self.post_hoc_s if self.post_hoc_s else 0.0


def _launch_consumer(analysis_cmd: str, env_extra: dict) -> subprocess.Popen:
    env = dict(os.environ)
    env.update(env_extra)
    try:
        return subprocess.Popen(shlex.split(analysis_cmd), env=env)
    except OSError as exc:
        raise ConsumerLaunchFailure(f"cannot launch {analysis_cmd!r}: {exc}") from exc


def pipeline_compare(
    spec: WorkloadSpec,
    cfg: EngineConfig,
    analysis_cmd: str,
    out_dir,
) -> PipelineReport:
    """Run the same workload twice: streamed in-situ, then write-then-post-process."""
    out_dir = Path(out_dir)

    # in-situ: producer streams steps; consumer processes them concurrently
    staging_cfg = replace(cfg, engine=ENGINE_STAGING,
                          endpoint=cfg.resolved_endpoint() or "127.0.0.1:0")
    t0 = time.perf_counter()
    ctx = build_engine(spec, staging_cfg, out_dir / "insitu")
    proc = _launch_consumer(analysis_cmd, {
        ENDPOINT_ENV: ctx.engine.endpoint, MODE_ENV: "staging",
    })
    try:
        drive_ranks(spec, ctx.engine)
    finally:
        ctx.engine.close(timeout=120.0)
    rc = proc.wait(timeout=120.0)
    in_situ_s = time.perf_counter() - t0
    if rc != 0:
        raise ConsumerLaunchFailure(f"in-situ consumer exited with {rc}")

    # post-hoc: finish all writes, then process the files
    file_cfg = replace(cfg, engine="file")
    t0 = time.perf_counter()
    results = run_workload(spec, file_cfg, repeats=1, out_dir=out_dir, config_id="posthoc")
    proc = _launch_consumer(analysis_cmd, {
        INDEX_ENV: str(results[0].index_dir), MODE_ENV: "files",
    })
    rc = proc.wait(timeout=120.0)
    post_hoc_s = time.perf_counter() - t0
    if rc != 0:
        raise ConsumerLaunchFailure(f"post-hoc consumer exited with {rc}")

    return PipelineReport(in_situ_s=in_situ_s, post_hoc_s=post_hoc_s)
