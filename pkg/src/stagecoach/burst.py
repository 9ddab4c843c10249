"""Burst-buffer writes with background drain to the PFS directory.

Aggregators append to node-local directories at burst-buffer speed; one
drain worker per node copies completed step regions to the PFS target,
verifies every copied block's checksum, and only then publishes that step's
index on the PFS side.  Writers never wait on the drain except in finalize.
"""

from __future__ import annotations

import logging
import queue
import threading
import time
from dataclasses import dataclass, field
from pathlib import Path

from .container import publish_step_index, read_block, subfile_name, write_variable_table
from .errors import DrainVerifyFailure
from .shim import RateLimiter, StorageTarget

log = logging.getLogger(__name__)

DRAIN_OFF = "off"
DRAIN_ASYNC = "async"


@dataclass
class BurstConfig:
    bb_dir: Path
    pfs_dir: Path
    drain: str = DRAIN_OFF
    drain_rate_limit: float | None = None

    def __post_init__(self):
        self.bb_dir = Path(self.bb_dir)
        self.pfs_dir = Path(self.pfs_dir)
        if self.bb_dir == self.pfs_dir:
            raise ValueError("bb_dir and pfs_dir must differ")
        if self.drain not in (DRAIN_OFF, DRAIN_ASYNC):
            raise ValueError(f"drain must be off|async, got {self.drain!r}")


@dataclass
class SubfileManifest:
    subfile_id: int
    node_id: int
    src_path: Path
    bytes_written: int = 0
    bytes_drained: int = 0
    state: str = "pending"  # pending | draining | complete


@dataclass
class BurstSummary:
    bytes_written: int
    bytes_drained: int
    drain_wall_s: float
    drain_s_per_step: dict[int, float] = field(default_factory=dict)
    drained: bool = False


@dataclass
class _Region:
    subfile_id: int
    step: int
    offset: int
    length: int
    entries: list


class BurstManager:
    """Coordinates per-node drain workers over the engine's sub-files."""

    def __init__(
        self,
        pfs_target: StorageTarget,
        drain: str = DRAIN_OFF,
        drain_rate_limit: float | None = None,
        verify_hook=None,
    ):
        self.pfs_target = pfs_target
        self.drain = drain
        self._limit = RateLimiter(drain_rate_limit) if drain_rate_limit else None
        self._verify_hook = verify_hook  # test hook, called between copy and verify
        self.manifest: dict[int, SubfileManifest] = {}
        self._queues: dict[int, queue.Queue] = {}
        self._workers: dict[int, threading.Thread] = {}
        self._lock = threading.Lock()
        self._error: DrainVerifyFailure | None = None
        self._step_meta: dict[int, tuple[list, bool, int]] = {}
        self._step_pending: dict[int, set[int]] = {}
        self._step_drain_window: dict[int, list[float]] = {}
        self._drain_busy_s = 0.0
        self._variables_provider = None
        self._finishing = threading.Event()

    # -- engine-facing --------------------------------------------------------

    def register_subfile(self, subfile_id: int, node_id: int, src_path: Path) -> None:
        with self._lock:
            self.manifest[subfile_id] = SubfileManifest(subfile_id, node_id, Path(src_path))
            if self.drain == DRAIN_ASYNC and node_id not in self._queues:
                q: queue.Queue = queue.Queue()
                self._queues[node_id] = q
                t = threading.Thread(
                    target=self._drain_loop, args=(node_id, q),
                    name=f"drain-node{node_id}", daemon=True,
                )
                self._workers[node_id] = t
                t.start()

    def set_variables_provider(self, fn) -> None:
        """Callable returning the variable table for PFS-side index publication."""
        self._variables_provider = fn

    def step_published(self, step, offsets, entries, complete, n_writers) -> None:
        """Engine hook: step's data is durable in the burst buffer."""
        by_subfile: dict[int, list] = {}
        for e in entries:
            by_subfile.setdefault(e.subfile_id, []).append(e)
        with self._lock:
            pending = set()
            for subfile_id, (start, end) in offsets.items():
                m = self.manifest[subfile_id]
                m.bytes_written = max(m.bytes_written, end)
                if end > start:
                    pending.add(subfile_id)
            self._step_meta[step] = (list(entries), complete, n_writers)
            self._step_pending[step] = pending
        if self.drain != DRAIN_ASYNC:
            return
        if not pending:
            self._maybe_publish_pfs_step(step)
            return
        for subfile_id, (start, end) in offsets.items():
            if end > start:
                m = self.manifest[subfile_id]
                region = _Region(subfile_id, step, start, end - start, by_subfile.get(subfile_id, []))
                self._queues[m.node_id].put(region)

    # -- drain worker -----------------------------------------------------------

    def _drain_loop(self, node_id: int, q: queue.Queue) -> None:
        while True:
            try:
                region = q.get(timeout=0.05)
            except queue.Empty:
                if self._finishing.is_set():
                    return
                continue
            if region is None:
                return
            try:
                self._drain_region(region)
            except DrainVerifyFailure as exc:
                with self._lock:
                    if self._error is None:
                        self._error = exc
                log.error("drain verify failed: %s", exc)
                return

    def _drain_region(self, region: _Region) -> None:
        m = self.manifest[region.subfile_id]
        t0 = time.monotonic()
        with self._lock:
            if m.state == "pending":
                m.state = "draining"
        name = subfile_name(region.subfile_id)
        dst = self.pfs_target.root / name
        # sub-files are append-only and regions arrive in order, so appending
        # the copied range lands it at the same offset as in the source
        self.pfs_target.copy_in(
            m.src_path, name, offset=region.offset, length=region.length,
            extra_limiter=self._limit,
        )
        if self._verify_hook is not None:
            self._verify_hook(dst, region)
        for entry in region.entries:
            try:
                read_block(dst, entry, verify=True)
            except Exception as exc:
                raise DrainVerifyFailure(
                    f"subfile {region.subfile_id} step {region.step}: {exc}"
                ) from exc
        t1 = time.monotonic()
        with self._lock:
            m.bytes_drained += region.length
            self._drain_busy_s += t1 - t0
            window = self._step_drain_window.setdefault(region.step, [t0, t1])
            window[0] = min(window[0], t0)
            window[1] = max(window[1], t1)
            pending = self._step_pending.get(region.step)
            if pending is not None:
                pending.discard(region.subfile_id)
                done = not pending
            else:
                done = False
        if done:
            self._maybe_publish_pfs_step(region.step)

    def _maybe_publish_pfs_step(self, step: int) -> None:
        entries, complete, n_writers = self._step_meta[step]
        if self._variables_provider is not None:
            write_variable_table(self.pfs_target.root, self._variables_provider())
        publish_step_index(self.pfs_target.root, step, entries, complete, n_writers)

    # -- lifecycle ----------------------------------------------------------------

    def finalize(self, timeout: float | None = None) -> BurstSummary:
        """Block until every queued region is drained and verified."""
        deadline = None if timeout is None else time.monotonic() + timeout
        self._finishing.set()
        for t in self._workers.values():
            t.join(None if deadline is None else max(0.0, deadline - time.monotonic()))
        with self._lock:
            if self._error is not None:
                raise self._error
            written = sum(m.bytes_written for m in self.manifest.values())
            drained = sum(m.bytes_drained for m in self.manifest.values())
            all_drained = self.drain == DRAIN_ASYNC and written == drained
            for m in self.manifest.values():
                if self.drain == DRAIN_ASYNC and m.bytes_drained == m.bytes_written:
                    m.state = "complete"
            per_step = {
                s: max(0.0, w[1] - w[0]) for s, w in self._step_drain_window.items()
            }
            summary = BurstSummary(
                bytes_written=written,
                bytes_drained=drained,
                drain_wall_s=self._drain_busy_s,
                drain_s_per_step=per_step,
                drained=all_drained,
            )
        if all_drained and self._variables_provider is not None:
            write_variable_table(self.pfs_target.root, self._variables_provider())
        return summary
