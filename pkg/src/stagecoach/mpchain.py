"""Process-per-rank chain writer over local sockets.

Each rank runs in its own process; blocks travel down the chain
(rank k -> rank k-1) as staging-framed messages until rank 0 appends them
to the sub-file and publishes the step index.  The step barrier is a
release frame relayed back up the chain.  Used by the multi-process tests;
the in-memory engine remains the production path.

    python -m stagecoach.mpchain --rank R --world N --steps S \
        --listen-port P --connect-port Q --out-dir DIR

Frames reuse the staging wire format; chain-only message types:

    10 CHAIN_BLOCK    serialized block (100-byte header + stored payload)
    11 CHAIN_END      u32 origin + u32 step   (origin finished its puts)
    12 CHAIN_FIN      u32 origin              (origin closed its stream)
    13 CHAIN_RELEASE  u32 step                (aggregator published the step)
"""

from __future__ import annotations

import argparse
import socket
import struct
import sys
import threading
import time
from pathlib import Path

import numpy as np

from .codecs import OperatorSpec, build_block
from .container import (
    SubfileWriter,
    publish_step_index,
    serialize_block,
    subfile_name,
    unpack_block_header,
    HEADER_SIZE,
)
from .model import DType, Selection, VariableDef
from .staging import read_frame, write_frame

MSG_CHAIN_BLOCK = 10
MSG_CHAIN_END = 11
MSG_CHAIN_FIN = 12
MSG_CHAIN_RELEASE = 13

ROWS_PER_RANK = 4
COLS = 16


def _rank_payload(rank: int, step: int) -> bytes:
    return np.full((ROWS_PER_RANK, COLS), rank * 1000 + step, np.float32).tobytes()


def rank_variable(world: int) -> VariableDef:
    return VariableDef("A", DType.f32, (world * ROWS_PER_RANK, COLS), 0)


def _parse_block(body: bytes):
    block = unpack_block_header(body[:HEADER_SIZE])
    block.stored = body[HEADER_SIZE:]
    return block


class _LockedSock:
    """Serializes whole frames from the relay thread and the local producer."""

    def __init__(self, sock: socket.socket):
        self.sock = sock
        self._lock = threading.Lock()

    def send(self, msg_type: int, body: bytes) -> None:
        with self._lock:
            write_frame(self.sock, msg_type, body)


def run_aggregator(args, up_sock: socket.socket) -> int:
    out_dir = Path(args.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    var = rank_variable(args.world)
    from stagecoach.container import write_variable_table
    write_variable_table(out_dir, [var])
    sink = open(out_dir / subfile_name(0), "ab")

    class _Sink:
        write = sink.write
        flush = sink.flush
        close = sink.close

    writer = SubfileWriter(0, _Sink())
    entries: dict[int, list] = {}
    ended: dict[int, set] = {}
    fins = {0}

    def handle_local(step: int) -> None:
        sel = Selection((0, 0), (ROWS_PER_RANK, COLS))
        block = build_block(var, step, sel, _rank_payload(0, step), OperatorSpec(), 0)
        entries.setdefault(step, []).append(writer.append_block(block))
        ended.setdefault(step, set()).add(0)

    for step in range(args.steps):
        handle_local(step)
        while len(ended.get(step, ())) < args.world:
            msg_type, body = read_frame(up_sock)
            if msg_type == MSG_CHAIN_BLOCK:
                block = _parse_block(body)
                entries.setdefault(block.step, []).append(writer.append_block(block))
            elif msg_type == MSG_CHAIN_END:
                origin, s = struct.unpack("<II", body)
                ended.setdefault(s, set()).add(origin)
            elif msg_type == MSG_CHAIN_FIN:
                fins.add(struct.unpack("<I", body)[0])
        writer.flush()
        publish_step_index(out_dir, step, entries.pop(step, []), True, args.world)
        if args.world > 1:
            write_frame(up_sock, MSG_CHAIN_RELEASE, struct.pack("<I", step))
    while len(fins) < args.world:
        msg_type, body = read_frame(up_sock)
        if msg_type == MSG_CHAIN_FIN:
            fins.add(struct.unpack("<I", body)[0])
    writer.close()
    return 0


def run_chain_rank(args, down: _LockedSock, up_sock: socket.socket | None) -> int:
    var = rank_variable(args.world)
    released = threading.Event()
    release_step = [-1]
    upstream_fins = args.world - 1 - args.rank  # ranks above me in the chain

    def relay_down():
        """Everything arriving from up the chain moves one hop toward rank 0."""
        remaining = upstream_fins
        while remaining > 0:
            msg_type, body = read_frame(up_sock)
            down.send(msg_type, body)
            if msg_type == MSG_CHAIN_FIN:
                remaining -= 1

    def relay_release():
        """Aggregator barrier releases travel back up."""
        while True:
            try:
                msg_type, body = read_frame(down.sock)
            except Exception:
                return
            if msg_type == MSG_CHAIN_RELEASE:
                release_step[0] = struct.unpack("<I", body)[0]
                released.set()
                if up_sock is not None:
                    write_frame(up_sock, MSG_CHAIN_RELEASE, body)

    threads = [threading.Thread(target=relay_release, daemon=True)]
    if up_sock is not None:
        threads.append(threading.Thread(target=relay_down, daemon=True))
    for t in threads:
        t.start()

    for step in range(args.steps):
        sel = Selection((args.rank * ROWS_PER_RANK, 0), (ROWS_PER_RANK, COLS))
        block = build_block(var, step, sel, _rank_payload(args.rank, step),
                            OperatorSpec(), args.rank)
        down.send(MSG_CHAIN_BLOCK, serialize_block(block))
        down.send(MSG_CHAIN_END, struct.pack("<II", args.rank, step))
        while not released.wait(0.05):
            pass
        released.clear()
        assert release_step[0] == step
    down.send(MSG_CHAIN_FIN, struct.pack("<I", args.rank))
    if up_sock is not None:
        threads[1].join(timeout=30)
    time.sleep(0.05)  # let the release relay drain before the socket drops
    return 0


def main(argv=None) -> int:
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--rank", type=int, required=True)
    ap.add_argument("--world", type=int, required=True)
    ap.add_argument("--steps", type=int, default=2)
    ap.add_argument("--listen-port", type=int, default=0,
                    help="port where the next rank up the chain connects")
    ap.add_argument("--connect-port", type=int, default=0,
                    help="port of the next rank down the chain")
    ap.add_argument("--out-dir", required=True)
    args = ap.parse_args(argv)

    up_sock = None
    if args.rank < args.world - 1:  # someone above me will connect
        listener = socket.create_server(("127.0.0.1", args.listen_port))
        listener.settimeout(30)
        up_sock, _ = listener.accept()
        listener.close()

    if args.rank == 0:
        if args.world == 1:
            return run_aggregator(args, None)
        return run_aggregator(args, up_sock)

    deadline = time.monotonic() + 30
    while True:
        try:
            down_raw = socket.create_connection(("127.0.0.1", args.connect_port),
                                                timeout=5)
            break
        except OSError:
            if time.monotonic() > deadline:
                raise
            time.sleep(0.05)
    return run_chain_rank(args, _LockedSock(down_raw), up_sock)


if __name__ == "__main__":
    sys.exit(main())
