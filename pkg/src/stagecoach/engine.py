"""N-M file write engine.

N rank streams are partitioned into M groups; group members forward blocks
neighbor-to-neighbor down the chain while the aggregator appends them to its
sub-file as they arrive.  The funnel baseline instead routes every block
straight to rank 0, which gathers the whole step in memory before writing.

End of step is a barrier: end_step returns once every aggregator has flushed
and the step's index is published.
"""

from __future__ import annotations

import logging
import threading
from pathlib import Path

from .channels import InProcChannel, MemoryTracker
from .codecs import CompressionTotals, OperatorTable, build_block
from .container import SubfileWriter, publish_step_index, subfile_name, write_variable_table
from .errors import InvalidShape, IoFailure, TransportFailure
from .model import DType, Selection, VariableDef, WriterStream
from .shim import RateLimiter, StorageTarget
from .topology import AggregatorAssignment, RankTopology

log = logging.getLogger(__name__)

_CHANNEL_CAPACITY = 2
_WAIT_POLL_S = 0.05


class _VariableRegistry:
    """Engine-wide variable table; ranks must declare consistently."""

    def __init__(self):
        self._lock = threading.Lock()
        self._by_name: dict[str, VariableDef] = {}
        self.dirty = False

    def register(self, name: str, dtype: DType, shape: tuple[int, ...]) -> VariableDef:
        with self._lock:
            existing = self._by_name.get(name)
            if existing is not None:
                if existing.dtype != dtype or existing.global_shape != shape:
                    raise InvalidShape(
                        f"{name!r} declared as {dtype}/{shape}, "
                        f"previously {existing.dtype}/{existing.global_shape}"
                    )
                return existing
            var = VariableDef(name, dtype, shape, var_id=len(self._by_name))
            self._by_name[name] = var
            self.dirty = True
            return var

    def variables(self) -> list[VariableDef]:
        with self._lock:
            return sorted(self._by_name.values(), key=lambda v: v.var_id)


class _StepCommitter:
    """Serializes index publication: one md.step file once every aggregator reports."""

    def __init__(self, engine: "FileWriteEngine"):
        self._engine = engine
        self._lock = threading.Lock()
        self._entries: dict[int, list] = {}
        self._ended: dict[int, set[int]] = {}
        self._offsets: dict[int, dict[int, tuple[int, int]]] = {}
        self._submitted: dict[int, set[int]] = {}
        self._published: set[int] = set()
        self.step_stats: dict[int, tuple[int, int]] = {}

    def submit(self, step: int, agg_rank: int, entries, ended_origins, region) -> None:
        engine = self._engine
        with self._lock:
            self._entries.setdefault(step, []).extend(entries)
            self._ended.setdefault(step, set()).update(ended_origins)
            self._offsets.setdefault(step, {})[region[0]] = (region[1], region[2])
            subs = self._submitted.setdefault(step, set())
            subs.add(agg_rank)
            if subs != set(engine.assignment.aggregators):
                return
            self._publish_locked(step)

    def _publish_locked(self, step: int) -> None:
        engine = self._engine
        entries = sorted(
            self._entries.pop(step, []), key=lambda e: (e.subfile_id, e.byte_offset)
        )
        ended = self._ended.pop(step, set())
        offsets = self._offsets.pop(step, {})
        self._submitted.pop(step, None)
        complete = ended == set(engine.all_ranks)
        engine._write_var_table_if_dirty()
        publish_step_index(engine.index_dir, step, entries, complete, len(ended))
        raw = sum(e.raw_len for e in entries)
        stored = sum(e.stored_len for e in entries)
        self.step_stats[step] = (raw, stored)
        self._published.add(step)
        if engine.burst is not None:
            engine.burst.step_published(step, offsets, entries, complete, len(ended))
        engine._signal_step(step)

    def absorb(self, step: int, entries, ended_origins, region) -> None:
        """Fold a never-published step's leftovers in (used at engine close)."""
        with self._lock:
            self._entries.setdefault(step, []).extend(entries)
            self._ended.setdefault(step, set()).update(ended_origins)
            self._offsets.setdefault(step, {})[region[0]] = (region[1], region[2])

    def finalize(self) -> None:
        """Publish whatever partially-reported steps remain (complete=False)."""
        with self._lock:
            for step in sorted(self._entries):
                if step not in self._published:
                    self._publish_locked(step)


class _Aggregator:
    """Owns one sub-file; consumes its inbox and appends blocks as they arrive."""

    def __init__(self, engine: "FileWriteEngine", rank: int):
        self.engine = engine
        self.rank = rank
        self.group = engine.assignment.groups[rank]
        self.subfile_id = engine.assignment.subfile_id(rank)
        target = engine.data_target_for(rank)
        self.subfile_path = target.root / subfile_name(self.subfile_id)
        self.writer = SubfileWriter(self.subfile_id, target.open_sink(subfile_name(self.subfile_id)))
        self.tracker = MemoryTracker()
        self._entries: dict[int, list] = {}
        self._ended: dict[int, set[int]] = {}
        self._gathered: dict[int, list] = {}
        self._step_start_offset = 0
        self._fins: set[int] = set()
        self.thread = threading.Thread(target=self._run, name=f"agg-{rank}", daemon=True)

    def _run(self) -> None:
        engine = self.engine
        inbox = engine.inboxes[self.rank]
        try:
            while True:
                item = inbox.get(stop=engine._failed)
                kind = item[0]
                if kind == "block":
                    self._on_block(item[1])
                elif kind == "end":
                    self._on_end(item[1], item[2])
                elif kind == "fin":
                    self._fins.add(item[1])
                    if self._fins == set(self.group):
                        break
        except TransportFailure as exc:
            engine._fail(str(exc))
        except IoFailure as exc:
            engine._fail(str(exc))
        finally:
            try:
                self.writer.flush()
            except Exception:
                pass

    def _on_block(self, block) -> None:
        self.tracker.acquire(block.stored_len)
        if self.engine.gather:
            self._gathered.setdefault(block.step, []).append(block)
        else:
            entry = self.writer.append_block(block)
            self._entries.setdefault(block.step, []).append(entry)
            self.tracker.release(block.stored_len)

    def _on_end(self, origin: int, step: int) -> None:
        ended = self._ended.setdefault(step, set())
        ended.add(origin)
        if ended != set(self.group):
            return
        if self.engine.gather:
            for block in self._gathered.pop(step, []):
                entry = self.writer.append_block(block)
                self._entries.setdefault(step, []).append(entry)
                self.tracker.release(block.stored_len)
        self.writer.flush()
        entries = self._entries.pop(step, [])
        region = (self.subfile_id, self._step_start_offset, self.writer.bytes_written)
        self._step_start_offset = self.writer.bytes_written
        self.engine.committer.submit(step, self.rank, entries, ended, region)
        self._ended.pop(step, None)

    def leftover_steps(self):
        """Steps with data or end markers that never reached publication."""
        steps = set(self._entries) | set(self._ended) | set(self._gathered)
        for step in sorted(steps):
            if self.engine.gather:
                for block in self._gathered.pop(step, []):
                    entry = self.writer.append_block(block)
                    self._entries.setdefault(step, []).append(entry)
                    self.tracker.release(block.stored_len)
                self.writer.flush()
            region = (self.subfile_id, self._step_start_offset, self.writer.bytes_written)
            self._step_start_offset = self.writer.bytes_written
            yield step, self._entries.pop(step, []), self._ended.pop(step, set()), region


class FileRankStream(WriterStream):
    """One simulated rank's writer surface, bound to the shared engine."""

    def __init__(self, engine: "FileWriteEngine", rank: int):
        super().__init__(rank)
        self.engine = engine

    def _register(self, name, dtype, shape):
        return self.engine.registry.register(name, dtype, shape)

    def _submit_block(self, var: VariableDef, selection: Selection, payload: bytes):
        engine = self.engine
        spec = engine.operators.for_variable(var.name)
        block = build_block(var, self._token.step_index, selection, payload, spec, self.rank)
        engine.totals.add(block.raw_len, block.stored_len)
        engine.route(self.rank, ("block", block), block.stored_len)

    def _flush_step(self, step: int) -> None:
        engine = self.engine
        engine.route(self.rank, ("end", self.rank, step), 0)
        engine.wait_step(step)

    def close(self) -> None:
        if not self._closed:
            self.engine.route(self.rank, ("fin", self.rank), 0)
        super().close()


class FileWriteEngine:
    """Shared state for one parallel write stream over N in-process ranks."""

    def __init__(
        self,
        topology: RankTopology,
        assignment: AggregatorAssignment,
        data_target: StorageTarget,
        index_dir=None,
        operators: OperatorTable | None = None,
        fabric: RateLimiter | None = None,
        gather: bool = False,
        burst=None,
        node_targets: dict[int, StorageTarget] | None = None,
    ):
        self.topology = topology
        self.assignment = assignment
        self.operators = operators or OperatorTable()
        self.fabric = fabric
        self.gather = gather
        self.burst = burst
        self._data_target = data_target
        self._node_targets = node_targets or {}
        self.index_dir = Path(index_dir) if index_dir else self._default_index_dir()
        self.index_dir.mkdir(parents=True, exist_ok=True)

        self.all_ranks = sorted(topology.all_ranks())
        self.registry = _VariableRegistry()
        self.totals = CompressionTotals()
        self.committer = _StepCommitter(self)

        self._failed = threading.Event()
        self._failure_reason = ""
        self._step_events: dict[int, threading.Event] = {}
        self._step_lock = threading.Lock()
        self._var_table_lock = threading.Lock()

        self.inboxes = {
            r: InProcChannel(_CHANNEL_CAPACITY, name=f"rank{r}")
            for r in self.all_ranks
        }
        self._fabric_charge = fabric.acquire if fabric is not None else None

        self.aggregators = {
            agg: _Aggregator(self, agg) for agg in assignment.aggregators
        }
        if burst is not None:
            burst.set_variables_provider(self.registry.variables)
            for agg, obj in self.aggregators.items():
                burst.register_subfile(obj.subfile_id, topology.node_of(agg), obj.subfile_path)
        self._relays: list[threading.Thread] = []
        if not assignment.star:
            for rank in self.all_ranks:
                if rank in self.aggregators:
                    continue
                group = assignment.groups[assignment.aggregator_of[rank]]
                pos = assignment.position_of[rank]
                upstream = len(group) - 1 - pos
                if upstream > 0:
                    t = threading.Thread(
                        target=self._relay_loop, args=(rank, upstream),
                        name=f"relay-{rank}", daemon=True,
                    )
                    self._relays.append(t)
        for t in self._relays:
            t.start()
        for a in self.aggregators.values():
            a.thread.start()
        self._closed = False

    # -- wiring ---------------------------------------------------------------

    def _default_index_dir(self) -> Path:
        return self._data_target.root

    def data_target_for(self, agg_rank: int) -> StorageTarget:
        if self._node_targets:
            return self._node_targets[self.topology.node_of(agg_rank)]
        return self._data_target

    def stream(self, rank: int) -> FileRankStream:
        return FileRankStream(self, rank)

    def route(self, src_rank: int, item, nbytes: int) -> None:
        """Send toward the aggregator: own inbox if aggregator, else downstream."""
        if self._failed.is_set():
            raise TransportFailure(self._failure_reason)
        if src_rank in self.aggregators:
            dst = src_rank
        else:
            dst = self.assignment.downstream_of(src_rank)
        self._transfer(src_rank, dst, item, nbytes)

    def _transfer(self, src: int, dst: int, item, nbytes: int) -> None:
        crosses = self.topology.node_of(src) != self.topology.node_of(dst)
        if crosses and self._fabric_charge is not None and nbytes:
            self._fabric_charge(nbytes)
        try:
            self.inboxes[dst].put(item)
        except TransportFailure:
            self._fail(f"rank {dst} unreachable from rank {src}")
            raise TransportFailure(self._failure_reason) from None

    def _relay_loop(self, rank: int, upstream_count: int) -> None:
        """Move items from this rank's inbox one hop down the chain."""
        inbox = self.inboxes[rank]
        dst = self.assignment.downstream_of(rank)
        fins = 0
        try:
            while fins < upstream_count:
                item = inbox.get(stop=self._failed)
                if item[0] == "block":
                    item[1].relay_count += 1
                    self._transfer(rank, dst, item, item[1].stored_len)
                else:
                    if item[0] == "fin":
                        fins += 1
                    self._transfer(rank, dst, item, 0)
        except TransportFailure as exc:
            self._fail(str(exc))

    # -- step barrier -----------------------------------------------------------

    def _step_event(self, step: int) -> threading.Event:
        with self._step_lock:
            ev = self._step_events.get(step)
            if ev is None:
                ev = self._step_events[step] = threading.Event()
            return ev

    def _signal_step(self, step: int) -> None:
        self._step_event(step).set()

    def wait_step(self, step: int) -> None:
        ev = self._step_event(step)
        while not ev.wait(_WAIT_POLL_S):
            if self._failed.is_set():
                raise TransportFailure(self._failure_reason)

    def _fail(self, reason: str) -> None:
        if not self._failed.is_set():
            self._failure_reason = reason
            self._failed.set()
            log.error("engine failed: %s", reason)

    # -- test hook ---------------------------------------------------------------

    def kill_rank(self, rank: int) -> None:
        """Simulate a dead worker: its inbox rejects traffic and the step aborts."""
        self.inboxes[rank].kill(f"rank {rank} killed")
        self._fail(f"rank {rank} killed")

    # -- index ---------------------------------------------------------------------

    def _write_var_table_if_dirty(self) -> None:
        with self._var_table_lock:
            if self.registry.dirty:
                write_variable_table(self.index_dir, self.registry.variables())
                self.registry.dirty = False

    @property
    def n_subfiles(self) -> int:
        return self.assignment.n_aggregators

    def subfile_paths(self) -> dict[int, Path]:
        return {a.subfile_id: a.subfile_path for a in self.aggregators.values()}

    def memory_high_water(self) -> dict[int, int]:
        return {a.rank: a.tracker.high_water for a in self.aggregators.values()}

    @property
    def failed(self) -> bool:
        return self._failed.is_set()

    # -- shutdown ---------------------------------------------------------------

    def close(self, drain_timeout: float | None = None):
        """Join workers, publish leftover (incomplete) steps, finalize burst drain."""
        if self._closed:
            return None
        self._closed = True
        for a in self.aggregators.values():
            a.thread.join(timeout=10.0)
        for t in self._relays:
            t.join(timeout=10.0)
        for step, entries, ended, region in self._leftovers():
            self.committer.absorb(step, entries, ended, region)
        self.committer.finalize()
        self._write_var_table_if_dirty()
        for a in self.aggregators.values():
            try:
                a.writer.close()
            except Exception:
                pass
        if self.burst is not None:
            return self.burst.finalize(timeout=drain_timeout)
        return None

    def _leftovers(self):
        for a in self.aggregators.values():
            if a.thread.is_alive():
                continue
            yield from a.leftover_steps()
