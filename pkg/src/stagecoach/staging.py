"""Producer/consumer step streaming over a TCP socket; no filesystem.

Wire format (little-endian): every frame is a u32 length followed by one
msg-type byte and the body; the length covers type byte plus body.

    1 HELLO          magic "SCST" + u16 protocol version
    2 HELLO_ACK      same body as HELLO
    3 STEP_ANNOUNCE  u32 step, variable table, block entry table
    4 BLOCK_REQUEST  u32 step + u32 var_id  (one request per variable)
    5 BLOCK_DATA     u32 step + u32 block_id + stored payload
    6 STEP_RELEASE   u32 step
    7 END_OF_STREAM  empty
    8 ERROR          u16 code + utf8 message

The producer buffers completed steps in memory until the consumer pulls
them; end_step returns as soon as the step is enqueued.
"""

from __future__ import annotations

import logging
import socket
import struct
import threading
import time
import zlib
from collections import deque
from dataclasses import dataclass

from .codecs import CompressionTotals, OperatorTable, build_block, decode_payload
from .container import IndexEntry
from .errors import (
    BindFailure,
    ConnectFailure,
    ProtocolError,
    TransportFailure,
)
from .model import DType, Selection, VariableDef, WriterStream
from .reader import scatter_blocks
from .errors import VariableNotFound

log = logging.getLogger(__name__)

MAGIC = b"SCST"
PROTOCOL_VERSION = 1

MSG_HELLO = 1
MSG_HELLO_ACK = 2
MSG_STEP_ANNOUNCE = 3
MSG_BLOCK_REQUEST = 4
MSG_BLOCK_DATA = 5
MSG_STEP_RELEASE = 6
MSG_END_OF_STREAM = 7
MSG_ERROR = 8

POLICY_BLOCK = "block"
POLICY_DISCARD_OLDEST = "discard_oldest"

_VAR_HEAD = struct.Struct("<IBBH")
_ENTRY_WIRE = struct.Struct("<IIB4Q4QBBQQI")
_HELLO_BODY = struct.Struct("<4sH")


def parse_endpoint(endpoint: str) -> tuple[str, int]:
    host, _, port = endpoint.rpartition(":")
    return host or "127.0.0.1", int(port)


# -- framing -------------------------------------------------------------------


def write_frame(sock: socket.socket, msg_type: int, body: bytes = b"") -> None:
    frame = struct.pack("<IB", 1 + len(body), msg_type) + body
    sock.sendall(frame)


def _read_exact(sock: socket.socket, n: int) -> bytes:
    chunks = []
    got = 0
    while got < n:
        data = sock.recv(min(n - got, 1 << 20))
        if not data:
            raise TransportFailure("connection closed mid-frame")
        chunks.append(data)
        got += len(data)
    return b"".join(chunks)


def read_frame(sock: socket.socket) -> tuple[int, bytes]:
    (length,) = struct.unpack("<I", _read_exact(sock, 4))
    if length < 1:
        raise ProtocolError("zero-length frame")
    payload = _read_exact(sock, length)
    return payload[0], payload[1:]


# -- step bundles ----------------------------------------------------------------


def _pad4(t):
    return tuple(t) + (0,) * (4 - len(t))


@dataclass
class WireEntry:
    """Block metadata as announced on the wire (no file offsets)."""

    block_id: int
    var_id: int
    start: tuple[int, ...]
    count: tuple[int, ...]
    codec_id: int
    shuffle: bool
    raw_len: int
    stored_len: int
    crc32: int

    def as_index_entry(self, step: int) -> IndexEntry:
        return IndexEntry(
            var_id=self.var_id, step=step, subfile_id=0, byte_offset=0,
            stored_len=self.stored_len, raw_len=self.raw_len,
            start=self.start, count=self.count,
            codec_id=self.codec_id, shuffle=self.shuffle, crc32=self.crc32,
        )


@dataclass
class StepBundle:
    step: int
    variables: list[VariableDef]
    entries: list[WireEntry]
    payloads: list[bytes]  # indexed by block_id

    @property
    def nbytes(self) -> int:
        return sum(len(p) for p in self.payloads)


def encode_announce(bundle: StepBundle) -> bytes:
    parts = [struct.pack("<I", bundle.step), struct.pack("<I", len(bundle.variables))]
    for v in bundle.variables:
        name = v.name.encode()
        parts.append(_VAR_HEAD.pack(v.var_id, v.dtype.code, v.ndim, len(name)))
        parts.append(struct.pack(f"<{v.ndim}Q", *v.global_shape) if v.ndim else b"")
        parts.append(name)
    parts.append(struct.pack("<I", len(bundle.entries)))
    for e in bundle.entries:
        parts.append(_ENTRY_WIRE.pack(
            e.block_id, e.var_id, len(e.count), *_pad4(e.start), *_pad4(e.count),
            e.codec_id, 1 if e.shuffle else 0, e.raw_len, e.stored_len, e.crc32,
        ))
    return b"".join(parts)


def decode_announce(body: bytes) -> tuple[int, list[VariableDef], list[WireEntry]]:
    (step,) = struct.unpack_from("<I", body, 0)
    (n_vars,) = struct.unpack_from("<I", body, 4)
    off = 8
    variables = []
    for _ in range(n_vars):
        var_id, dtype_code, ndim, name_len = _VAR_HEAD.unpack_from(body, off)
        off += _VAR_HEAD.size
        shape = struct.unpack_from(f"<{ndim}Q", body, off) if ndim else ()
        off += 8 * ndim
        name = body[off:off + name_len].decode()
        off += name_len
        variables.append(VariableDef(name, DType.from_code(dtype_code), tuple(shape), var_id))
    (n_entries,) = struct.unpack_from("<I", body, off)
    off += 4
    entries = []
    for _ in range(n_entries):
        (block_id, var_id, ndim, s0, s1, s2, s3, c0, c1, c2, c3,
         codec, shuf, raw_len, stored_len, crc) = _ENTRY_WIRE.unpack_from(body, off)
        off += _ENTRY_WIRE.size
        entries.append(WireEntry(
            block_id, var_id, (s0, s1, s2, s3)[:ndim], (c0, c1, c2, c3)[:ndim],
            codec, bool(shuf), raw_len, stored_len, crc,
        ))
    return step, variables, entries


# -- producer-side queue -----------------------------------------------------------


class StepQueue:
    """Bounded in-memory buffer of completed steps awaiting the consumer."""

    def __init__(self, max_steps: int = 4, policy: str = POLICY_BLOCK):
        if max_steps < 1:
            raise ValueError("max_steps must be >= 1")
        if policy not in (POLICY_BLOCK, POLICY_DISCARD_OLDEST):
            raise ValueError(f"unknown queue policy {policy!r}")
        self.max_steps = max_steps
        self.policy = policy
        self._dq: deque[StepBundle] = deque()
        self._cond = threading.Condition()
        self._closed = False
        self.dropped_steps: list[int] = []
        self.current_bytes = 0
        self.high_water_bytes = 0

    def push(self, bundle: StepBundle) -> None:
        with self._cond:
            if self.policy == POLICY_BLOCK:
                while len(self._dq) >= self.max_steps:
                    self._cond.wait(0.05)
            else:
                while len(self._dq) >= self.max_steps:
                    dropped = self._dq.popleft()
                    self.current_bytes -= dropped.nbytes
                    self.dropped_steps.append(dropped.step)
                    log.warning("staging queue full: dropped step %d", dropped.step)
            self._dq.append(bundle)
            self.current_bytes += bundle.nbytes
            if self.current_bytes > self.high_water_bytes:
                self.high_water_bytes = self.current_bytes
            self._cond.notify_all()

    def next_bundle(self, after_step: int) -> StepBundle | None:
        """Oldest buffered bundle newer than ``after_step``; None at end of stream."""
        with self._cond:
            while True:
                for b in self._dq:
                    if b.step > after_step:
                        return b
                if self._closed:
                    return None
                self._cond.wait(0.05)

    def release(self, step: int) -> None:
        with self._cond:
            for b in list(self._dq):
                if b.step <= step:
                    self._dq.remove(b)
                    self.current_bytes -= b.nbytes
            self._cond.notify_all()

    def close(self) -> None:
        with self._cond:
            self._closed = True
            self._cond.notify_all()

    def wait_empty(self, timeout: float | None = None) -> bool:
        deadline = None if timeout is None else time.monotonic() + timeout
        with self._cond:
            while self._dq:
                remaining = None if deadline is None else deadline - time.monotonic()
                if remaining is not None and remaining <= 0:
                    return False
                self._cond.wait(0.05 if remaining is None else min(0.05, remaining))
            return True

    def __len__(self):
        with self._cond:
            return len(self._dq)


# -- producer ------------------------------------------------------------------------


class StagingRankStream(WriterStream):
    def __init__(self, engine: "StagingEngine", rank: int):
        super().__init__(rank)
        self.engine = engine

    def _register(self, name, dtype, shape):
        return self.engine.registry_register(name, dtype, shape)

    def _submit_block(self, var, selection, payload):
        spec = self.engine.operators.for_variable(var.name)
        block = build_block(var, self._token.step_index, selection, payload, spec, self.rank)
        self.engine.totals.add(block.raw_len, block.stored_len)
        self.engine.collect(self.rank, block)

    def _flush_step(self, step: int) -> None:
        self.engine.rank_end_step(self.rank, step)

    def close(self) -> None:
        if not self._closed:
            self.engine.rank_closed(self.rank)
        super().close()


class StagingEngine:
    """Producer: N rank streams whose completed steps buffer in a StepQueue."""

    def __init__(
        self,
        endpoint: str,
        world_size: int = 1,
        operators: OperatorTable | None = None,
        max_steps: int = 4,
        policy: str = POLICY_BLOCK,
    ):
        self.operators = operators or OperatorTable()
        self.world_size = world_size
        self.totals = CompressionTotals()
        self.queue = StepQueue(max_steps, policy)
        self.step_stats: dict[int, tuple[int, int]] = {}
        self.producer_log: list[tuple[int, float, float]] = []

        self._vars: dict[str, VariableDef] = {}
        self._lock = threading.Lock()
        self._step_blocks: dict[int, list] = {}
        self._step_ends: dict[int, set[int]] = {}
        self._step_enter: dict[int, float] = {}
        self._step_done: dict[int, threading.Event] = {}
        self._closed_ranks: set[int] = set()
        self._server_error: Exception | None = None

        host, port = parse_endpoint(endpoint)
        try:
            self._listener = socket.create_server((host, port))
        except OSError as exc:
            raise BindFailure(f"cannot bind {endpoint}: {exc}") from exc
        self._listener.settimeout(0.2)  # lets the acceptor notice close()
        self._closing = threading.Event()
        self.endpoint = f"{host}:{self._listener.getsockname()[1]}"
        self._accept_thread = threading.Thread(
            target=self._serve, name="staging-serve", daemon=True
        )
        self._accept_thread.start()

    # -- stream surface ------------------------------------------------------------

    def stream(self, rank: int = 0) -> StagingRankStream:
        return StagingRankStream(self, rank)

    def registry_register(self, name, dtype, shape):
        with self._lock:
            existing = self._vars.get(name)
            if existing is not None:
                return existing
            var = VariableDef(name, dtype, shape, var_id=len(self._vars))
            self._vars[name] = var
            return var

    def collect(self, rank: int, block) -> None:
        with self._lock:
            self._step_blocks.setdefault(block.step, []).append(block)

    def rank_end_step(self, rank: int, step: int) -> None:
        with self._lock:
            self._step_enter.setdefault(step, time.monotonic())
            ends = self._step_ends.setdefault(step, set())
            ends.add(rank)
            done = self._step_done.setdefault(step, threading.Event())
            ready = len(ends) == self.world_size
            if ready:
                blocks = self._step_blocks.pop(step, [])
        if ready:
            self._publish(step, blocks)
            done.set()
        while not done.wait(0.05):
            if self._server_error is not None:
                raise TransportFailure(str(self._server_error))

    def _publish(self, step: int, blocks) -> None:
        blocks.sort(key=lambda b: (b.var_id, b.start))
        entries = []
        payloads = []
        for i, b in enumerate(blocks):
            entries.append(WireEntry(
                i, b.var_id, b.start, b.count, b.codec_id, b.shuffle,
                b.raw_len, b.stored_len, b.crc32,
            ))
            payloads.append(b.stored)
        with self._lock:
            variables = sorted(self._vars.values(), key=lambda v: v.var_id)
        bundle = StepBundle(step, variables, entries, payloads)
        raw = sum(e.raw_len for e in entries)
        stored = sum(e.stored_len for e in entries)
        self.queue.push(bundle)  # backpressure happens here (policy=block)
        self.step_stats[step] = (raw, stored)
        self.producer_log.append((step, self._step_enter[step], time.monotonic()))

    def rank_closed(self, rank: int) -> None:
        with self._lock:
            self._closed_ranks.add(rank)
            if len(self._closed_ranks) == self.world_size:
                self.queue.close()

    def close(self, timeout: float | None = None) -> None:
        """Wait for the consumer to drain the queue, then stop serving."""
        self.queue.close()
        self.queue.wait_empty(timeout)
        self._closing.set()
        try:
            self._listener.close()
        except OSError:
            pass
        self._accept_thread.join(timeout=5.0)

    # -- transfer side ----------------------------------------------------------------

    def _serve(self) -> None:
        conn = None
        try:
            while True:
                try:
                    conn, _addr = self._listener.accept()
                except socket.timeout:
                    if self._closing.is_set():
                        return
                    continue
                except OSError:
                    return  # listener closed
                conn.settimeout(None)
                try:
                    if self._handshake(conn):
                        break
                except (TransportFailure, ProtocolError) as exc:
                    log.warning("handshake failed: %s", exc)
                    conn.close()
                    conn = None
            self._serve_steps(conn)
        except (TransportFailure, OSError) as exc:
            log.warning("staging transfer stopped: %s", exc)
            self._server_error = exc
        finally:
            if conn is not None:
                conn.close()

    def _handshake(self, conn: socket.socket) -> bool:
        msg_type, body = read_frame(conn)
        if msg_type != MSG_HELLO:
            write_frame(conn, MSG_ERROR, struct.pack("<H", 1) + b"expected HELLO")
            raise ProtocolError(f"expected HELLO, got {msg_type}")
        magic, version = _HELLO_BODY.unpack_from(body)
        if magic != MAGIC or version != PROTOCOL_VERSION:
            write_frame(
                conn, MSG_ERROR,
                struct.pack("<H", 2) + f"bad magic/version {magic!r}/{version}".encode(),
            )
            raise ProtocolError(f"bad HELLO: magic={magic!r} version={version}")
        write_frame(conn, MSG_HELLO_ACK, _HELLO_BODY.pack(MAGIC, PROTOCOL_VERSION))
        return True

    def _serve_steps(self, conn: socket.socket) -> None:
        last = -1
        while True:
            bundle = self.queue.next_bundle(last)
            if bundle is None:
                write_frame(conn, MSG_END_OF_STREAM)
                return
            write_frame(conn, MSG_STEP_ANNOUNCE, encode_announce(bundle))
            while True:
                msg_type, body = read_frame(conn)
                if msg_type == MSG_BLOCK_REQUEST:
                    step, var_id = struct.unpack("<II", body)
                    if step != bundle.step:
                        raise ProtocolError(f"request for step {step} during {bundle.step}")
                    for e in bundle.entries:
                        if e.var_id == var_id:
                            head = struct.pack("<II", bundle.step, e.block_id)
                            write_frame(conn, MSG_BLOCK_DATA, head + bundle.payloads[e.block_id])
                elif msg_type == MSG_STEP_RELEASE:
                    (step,) = struct.unpack("<I", body)
                    self.queue.release(step)
                    last = max(last, step)
                    break
                else:
                    raise ProtocolError(f"unexpected message {msg_type} inside step")


# -- consumer ----------------------------------------------------------------------


@dataclass
class ConsumerStep:
    step: int
    variables: dict[str, VariableDef]
    entries: list[WireEntry]


class StagingConsumer:
    """Blocking reader with the same step surface as the file reader."""

    def __init__(self, endpoint: str, connect_timeout: float = 10.0):
        host, port = parse_endpoint(endpoint)
        deadline = time.monotonic() + connect_timeout
        last_exc: Exception | None = None
        while True:
            try:
                self._sock = socket.create_connection((host, port), timeout=connect_timeout)
                break
            except OSError as exc:
                last_exc = exc
                if time.monotonic() >= deadline:
                    raise ConnectFailure(f"cannot connect {endpoint}: {exc}") from exc
                time.sleep(0.05)
        self._sock.settimeout(None)
        self.message_log: list[tuple[str, int, int]] = []
        self.consumer_log: list[tuple[int, float, float, float]] = []
        self._current: ConsumerStep | None = None
        self._ended = False
        self._send(MSG_HELLO, _HELLO_BODY.pack(MAGIC, PROTOCOL_VERSION), -1)
        msg_type, body = self._recv()
        if msg_type == MSG_ERROR:
            raise ProtocolError(_error_text(body))
        if msg_type != MSG_HELLO_ACK:
            raise ProtocolError(f"expected HELLO_ACK, got {msg_type}")
        magic, version = _HELLO_BODY.unpack_from(body)
        if magic != MAGIC or version != PROTOCOL_VERSION:
            raise ProtocolError(f"bad HELLO_ACK: magic={magic!r} version={version}")

    def _send(self, msg_type: int, body: bytes, step: int) -> None:
        self.message_log.append(("send", msg_type, step))
        write_frame(self._sock, msg_type, body)

    def _recv(self) -> tuple[int, bytes]:
        msg_type, body = read_frame(self._sock)
        step = -1
        if msg_type in (MSG_STEP_ANNOUNCE, MSG_BLOCK_DATA, MSG_STEP_RELEASE):
            step = struct.unpack_from("<I", body)[0]
        self.message_log.append(("recv", msg_type, step))
        return msg_type, body

    # -- step surface -----------------------------------------------------------------

    def begin_step(self) -> ConsumerStep | None:
        """Next announced step, or None once the producer is done."""
        if self._ended:
            return None
        if self._current is not None:
            raise ProtocolError("previous step not released")
        t_wait = time.monotonic()
        msg_type, body = self._recv()
        if msg_type == MSG_END_OF_STREAM:
            self._ended = True
            return None
        if msg_type == MSG_ERROR:
            raise ProtocolError(_error_text(body))
        if msg_type != MSG_STEP_ANNOUNCE:
            raise ProtocolError(f"expected STEP_ANNOUNCE, got {msg_type}")
        step, variables, entries = decode_announce(body)
        self._current = ConsumerStep(step, {v.name: v for v in variables}, entries)
        self._t_wait = t_wait
        self._t_announce = time.monotonic()
        return self._current

    def available_variables(self) -> list[str]:
        if self._current is None:
            return []
        present = {e.var_id for e in self._current.entries}
        return sorted(
            name for name, v in self._current.variables.items() if v.var_id in present
        )

    def get(self, name: str, selection: Selection | None = None):
        if self._current is None:
            raise ProtocolError("no step open")
        var = self._current.variables.get(name)
        if var is None:
            raise VariableNotFound(f"variable {name!r} not in step {self._current.step}")
        entries = [e for e in self._current.entries if e.var_id == var.var_id]
        if not entries:
            raise VariableNotFound(f"variable {name!r} has no blocks in step {self._current.step}")
        self._send(MSG_BLOCK_REQUEST, struct.pack("<II", self._current.step, var.var_id),
                   self._current.step)
        by_id = {e.block_id: e for e in entries}
        got: dict[int, bytes] = {}
        while len(got) < len(entries):
            msg_type, body = self._recv()
            if msg_type != MSG_BLOCK_DATA:
                raise ProtocolError(f"expected BLOCK_DATA, got {msg_type}")
            step, block_id = struct.unpack_from("<II", body)
            payload = body[8:]
            e = by_id.get(block_id)
            if e is None or step != self._current.step:
                raise ProtocolError(f"unexpected block {block_id} for step {step}")
            if (zlib.crc32(payload) & 0xFFFFFFFF) != e.crc32:
                raise ProtocolError(f"block {block_id} checksum mismatch on the wire")
            got[block_id] = decode_payload(
                payload, e.codec_id, e.shuffle, e.raw_len, var.dtype.itemsize
            )
        if selection is None:
            selection = Selection.whole(var.global_shape)
        pairs = [(by_id[i].as_index_entry(self._current.step), got[i]) for i in sorted(got)]
        return scatter_blocks(var, selection, pairs)

    def end_step(self) -> None:
        if self._current is None:
            raise ProtocolError("no step open")
        step = self._current.step
        self._send(MSG_STEP_RELEASE, struct.pack("<I", step), step)
        self.consumer_log.append((step, self._t_wait, self._t_announce, time.monotonic()))
        self._current = None

    def steps(self):
        """Iterate announced steps; each is released when the body finishes."""
        while True:
            step = self.begin_step()
            if step is None:
                return
            yield step
            self.end_step()

    def close(self) -> None:
        try:
            self._sock.close()
        except OSError:
            pass

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()


def _error_text(body: bytes) -> str:
    (code,) = struct.unpack_from("<H", body)
    return f"peer error {code}: {body[2:].decode(errors='replace')}"


# -- pipeline overlap report ---------------------------------------------------------


@dataclass
class OverlapStats:
    time_to_solution_s: float
    producer_blocked_s: float
    consumer_idle_s: float
    steps: int = 0


def pipeline_overlap_report(producer_log, consumer_log) -> OverlapStats:
    """Compare timestamped per-step logs from both ends of the pipeline.

    producer_log rows: (step, t_enter_end_step, t_return);
    consumer_log rows: (step, t_wait_start, t_received, t_done).
    """
    if not producer_log and not consumer_log:
        return OverlapStats(0.0, 0.0, 0.0, 0)
    stamps = [t for row in producer_log for t in row[1:]]
    stamps += [t for row in consumer_log for t in row[1:]]
    blocked = sum(row[2] - row[1] for row in producer_log)
    idle = sum(row[2] - row[1] for row in consumer_log)
    return OverlapStats(
        time_to_solution_s=max(stamps) - min(stamps),
        producer_blocked_s=blocked,
        consumer_idle_s=idle,
        steps=len(producer_log),
    )
