"""Self-describing on-disk container: data sub-files plus a global index.

Layout (all integers little-endian):

* ``data.<m>``      append-only sub-file of aggregator m; a sequence of
                    100-byte block headers each followed by the stored
                    (post-codec) payload.
* ``md.idx``        variable table: magic ``SCIX``, u16 format version,
                    u32 record count, then length-prefixed variable records.
* ``md.step.<s>``   one file per published step: magic ``SCSP``, u16 format
                    version, u32 step, u8 complete flag, u32 writer count,
                    u32 record count, then length-prefixed entry records.

Step files are written to ``md.step.<s>.tmp`` and renamed, so readers see
either the old or the new index, never a torn file.
"""

from __future__ import annotations

import os
import struct
import zlib
from dataclasses import dataclass
from pathlib import Path

from .errors import BadMagic, ChecksumMismatch, IoFailure
from .model import MAX_RANK, DataBlock, DType, VariableDef

FORMAT_VERSION = 1

BLOCK_MAGIC = b"SCBK"
INDEX_MAGIC = b"SCIX"
STEP_MAGIC = b"SCSP"

# magic, var_id, step, ndim, start[4], count[4], dtype, codec, shuffle,
# raw_len, stored_len, crc32
_HEADER = struct.Struct("<4sIIB4Q4QBBBQQI")
HEADER_SIZE = _HEADER.size  # 100

# var_id, subfile_id, byte_offset, ndim, start[4], count[4], codec, shuffle,
# raw_len, stored_len, crc32
_ENTRY = struct.Struct("<IIQB4Q4QBBQQI")

_IDX_HEAD = struct.Struct("<4sHI")
_STEP_HEAD = struct.Struct("<4sHIBII")


def subfile_name(subfile_id: int) -> str:
    return f"data.{subfile_id}"


def step_index_name(step: int) -> str:
    return f"md.step.{step}"


@dataclass(frozen=True)
class IndexEntry:
    """Locates one block inside one sub-file; byte_offset points at the magic."""

    var_id: int
    step: int
    subfile_id: int
    byte_offset: int
    stored_len: int
    raw_len: int
    start: tuple[int, ...]
    count: tuple[int, ...]
    codec_id: int
    shuffle: bool
    crc32: int

    @property
    def ndim(self) -> int:
        return len(self.count)


def _pad4(t: tuple[int, ...]) -> tuple[int, int, int, int]:
    return tuple(t) + (0,) * (MAX_RANK - len(t))


def pack_block_header(block: DataBlock) -> bytes:
    return _HEADER.pack(
        BLOCK_MAGIC,
        block.var_id,
        block.step,
        block.ndim,
        *_pad4(block.start),
        *_pad4(block.count),
        block.dtype.code,
        block.codec_id,
        1 if block.shuffle else 0,
        block.raw_len,
        block.stored_len,
        block.crc32,
    )


def unpack_block_header(buf: bytes) -> DataBlock:
    """Parse a header into a block with empty payload (caller attaches it)."""
    (magic, var_id, step, ndim, s0, s1, s2, s3, c0, c1, c2, c3,
     dtype_code, codec, shuf, raw_len, stored_len, crc) = _HEADER.unpack(buf)
    if magic != BLOCK_MAGIC:
        raise BadMagic(f"expected {BLOCK_MAGIC!r}, found {magic!r}")
    return DataBlock(
        var_id=var_id,
        step=step,
        start=(s0, s1, s2, s3)[:ndim],
        count=(c0, c1, c2, c3)[:ndim],
        dtype=DType.from_code(dtype_code),
        raw_len=raw_len,
        codec_id=codec,
        shuffle=bool(shuf),
        stored=b"",
        crc32=crc,
    )


def serialize_block(block: DataBlock) -> bytes:
    """Header followed by the stored payload — the sub-file (and wire) encoding."""
    return pack_block_header(block) + block.stored


class SubfileWriter:
    """Single-aggregator append stream over one ``data.<m>`` file.

    ``sink`` is any object with write/flush/close and a running byte count;
    the burst-buffer and shim layers supply throttled sinks.
    """

    def __init__(self, subfile_id: int, sink):
        self.subfile_id = subfile_id
        self._sink = sink
        self._offset = 0

    @property
    def bytes_written(self) -> int:
        return self._offset

    def append_block(self, block: DataBlock) -> IndexEntry:
        offset = self._offset
        try:
            self._sink.write(pack_block_header(block))
            self._sink.write(block.stored)
        except OSError as exc:
            raise IoFailure(f"append to sub-file {self.subfile_id}: {exc}") from exc
        self._offset = offset + HEADER_SIZE + block.stored_len
        return IndexEntry(
            var_id=block.var_id,
            step=block.step,
            subfile_id=self.subfile_id,
            byte_offset=offset,
            stored_len=block.stored_len,
            raw_len=block.raw_len,
            start=block.start,
            count=block.count,
            codec_id=block.codec_id,
            shuffle=block.shuffle,
            crc32=block.crc32,
        )

    def flush(self) -> None:
        self._sink.flush()

    def close(self) -> None:
        self._sink.close()


def read_block(subfile_path, entry: IndexEntry, verify: bool = True) -> DataBlock:
    """Load one block through its index entry; verifies magic and checksum."""
    try:
        with open(subfile_path, "rb") as f:
            f.seek(entry.byte_offset)
            header = f.read(HEADER_SIZE)
            if len(header) < HEADER_SIZE:
                raise IoFailure(f"truncated header at {entry.byte_offset} in {subfile_path}")
            block = unpack_block_header(header)
            stored = f.read(entry.stored_len)
    except OSError as exc:
        raise IoFailure(f"read sub-file {subfile_path}: {exc}") from exc
    if len(stored) < entry.stored_len:
        raise IoFailure(f"truncated payload at {entry.byte_offset} in {subfile_path}")
    block.stored = stored
    if verify and (zlib.crc32(stored) & 0xFFFFFFFF) != block.crc32:
        raise ChecksumMismatch(
            f"subfile {entry.subfile_id} offset {entry.byte_offset}: stored payload corrupt"
        )
    return block


# -- index serialization ------------------------------------------------------


def _var_record(var: VariableDef) -> bytes:
    name = var.name.encode()
    body = struct.pack(
        f"<IBB{var.ndim}Q{len(name)}s", var.var_id, var.dtype.code, var.ndim,
        *var.global_shape, name,
    )
    return struct.pack("<I", len(body)) + body


def _parse_var_record(body: bytes) -> VariableDef:
    var_id, dtype_code, ndim = struct.unpack_from("<IBB", body)
    shape = struct.unpack_from(f"<{ndim}Q", body, 6)
    name = body[6 + 8 * ndim:].decode()
    return VariableDef(name, DType.from_code(dtype_code), tuple(shape), var_id)


def _entry_record(e: IndexEntry) -> bytes:
    body = _ENTRY.pack(
        e.var_id, e.subfile_id, e.byte_offset, e.ndim,
        *_pad4(e.start), *_pad4(e.count),
        e.codec_id, 1 if e.shuffle else 0, e.raw_len, e.stored_len, e.crc32,
    )
    return struct.pack("<I", len(body)) + body


def _parse_entry_record(body: bytes, step: int) -> IndexEntry:
    (var_id, subfile_id, byte_offset, ndim, s0, s1, s2, s3, c0, c1, c2, c3,
     codec, shuf, raw_len, stored_len, crc) = _ENTRY.unpack(body)
    return IndexEntry(
        var_id=var_id,
        step=step,
        subfile_id=subfile_id,
        byte_offset=byte_offset,
        stored_len=stored_len,
        raw_len=raw_len,
        start=(s0, s1, s2, s3)[:ndim],
        count=(c0, c1, c2, c3)[:ndim],
        codec_id=codec,
        shuffle=bool(shuf),
        crc32=crc,
    )


def _atomic_write(path: Path, payload: bytes) -> None:
    # rename gives readers an untorn view; crash durability is out of scope
    tmp = path.with_name(path.name + ".tmp")
    try:
        with open(tmp, "wb") as f:
            f.write(payload)
            f.flush()
        os.replace(tmp, path)
    except OSError as exc:
        raise IoFailure(f"publish {path}: {exc}") from exc


def write_variable_table(index_dir, variables) -> None:
    payload = _IDX_HEAD.pack(INDEX_MAGIC, FORMAT_VERSION, len(variables))
    payload += b"".join(_var_record(v) for v in variables)
    _atomic_write(Path(index_dir) / "md.idx", payload)


def publish_step_index(index_dir, step: int, entries, complete: bool, n_writers: int) -> None:
    """Atomically publish one step's entries (temp file, then rename)."""
    payload = _STEP_HEAD.pack(STEP_MAGIC, FORMAT_VERSION, step,
                              1 if complete else 0, n_writers, len(entries))
    payload += b"".join(_entry_record(e) for e in entries)
    _atomic_write(Path(index_dir) / step_index_name(step), payload)


def _read_records(buf: bytes, offset: int, n: int):
    for _ in range(n):
        (length,) = struct.unpack_from("<I", buf, offset)
        offset += 4
        yield buf[offset:offset + length]
        offset += length


@dataclass
class StepIndex:
    step: int
    complete: bool
    n_writers: int
    entries: list[IndexEntry]


class GlobalIndex:
    """In-memory view of md.idx plus every published md.step.* file."""

    def __init__(self, variables: list[VariableDef], steps: dict[int, StepIndex]):
        self.variables = variables
        self.by_id = {v.var_id: v for v in variables}
        self.by_name = {v.name: v for v in variables}
        self.steps = steps

    @classmethod
    def load(cls, index_dir) -> "GlobalIndex":
        index_dir = Path(index_dir)
        idx = index_dir / "md.idx"
        try:
            buf = idx.read_bytes()
        except OSError as exc:
            raise IoFailure(f"read {idx}: {exc}") from exc
        magic, version, n_vars = _IDX_HEAD.unpack_from(buf)
        if magic != INDEX_MAGIC:
            raise BadMagic(f"{idx}: expected {INDEX_MAGIC!r}, found {magic!r}")
        if version != FORMAT_VERSION:
            raise IoFailure(f"{idx}: unsupported format version {version}")
        variables = [_parse_var_record(r) for r in _read_records(buf, _IDX_HEAD.size, n_vars)]

        steps: dict[int, StepIndex] = {}
        for path in index_dir.glob("md.step.*"):
            if path.name.endswith(".tmp"):
                continue
            sbuf = path.read_bytes()
            magic, version, step, complete, n_writers, n_entries = _STEP_HEAD.unpack_from(sbuf)
            if magic != STEP_MAGIC:
                raise BadMagic(f"{path}: expected {STEP_MAGIC!r}, found {magic!r}")
            entries = [
                _parse_entry_record(r, step)
                for r in _read_records(sbuf, _STEP_HEAD.size, n_entries)
            ]
            steps[step] = StepIndex(step, bool(complete), n_writers, entries)
        return cls(variables, steps)

    def complete_steps(self) -> list[int]:
        return sorted(s for s, si in self.steps.items() if si.complete)

    def entries_for(self, step: int, var_id: int) -> list[IndexEntry]:
        si = self.steps.get(step)
        if si is None:
            return []
        return [e for e in si.entries if e.var_id == var_id]
