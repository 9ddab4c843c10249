"""In-line block operators: optional byte shuffle, then a lossless codec.

Codec ids are wire- and disk-stable:

    0  none      (raw bytes; also the store-raw fallback)
    1  lz4       (LZ4 block format)
    2  deflate   (zlib stream)
    3  zstd

The shuffle groups byte j of every element together: output position
``j * n_elements + i`` receives byte j of element i.  All operators are
pure functions, safe to call from any worker.
"""

from __future__ import annotations

import threading
import zlib
from dataclasses import dataclass

import numpy as np
import pyarrow as pa

from .errors import CodecError, SizeNotMultiple
from .model import DataBlock, Selection, VariableDef

CODEC_NONE = 0
CODEC_LZ4 = 1
CODEC_DEFLATE = 2
CODEC_ZSTD = 3

CODEC_NAMES = {CODEC_NONE: "none", CODEC_LZ4: "lz4", CODEC_DEFLATE: "deflate", CODEC_ZSTD: "zstd"}
CODEC_IDS = {v: k for k, v in CODEC_NAMES.items()}

DEFAULT_LEVELS = {CODEC_DEFLATE: 6, CODEC_ZSTD: 3}

# pyarrow Codec objects are not documented thread-safe; keep one per thread.
_local = threading.local()


def codec_id(name: str) -> int:
    try:
        return CODEC_IDS[name.lower()]
    except KeyError:
        raise CodecError(f"unknown codec {name!r}") from None


@dataclass(frozen=True)
class OperatorSpec:
    """Per-stream (or per-variable) compression configuration."""

    codec: int = CODEC_NONE
    level: int | None = None
    shuffle: bool = False

    @classmethod
    def from_names(cls, codec: str = "none", level: int | None = None, shuffle: bool = False):
        return cls(codec_id(codec), level, shuffle)


def shuffle_bytes(payload: bytes, elem_size: int) -> bytes:
    if elem_size == 1:
        return payload
    if len(payload) % elem_size:
        raise SizeNotMultiple(
            f"payload of {len(payload)} bytes not a multiple of element size {elem_size}"
        )
    a = np.frombuffer(payload, dtype=np.uint8)
    return np.ascontiguousarray(a.reshape(-1, elem_size).T).tobytes()


def unshuffle_bytes(shuffled: bytes, elem_size: int) -> bytes:
    if elem_size == 1:
        return shuffled
    if len(shuffled) % elem_size:
        raise SizeNotMultiple(
            f"payload of {len(shuffled)} bytes not a multiple of element size {elem_size}"
        )
    a = np.frombuffer(shuffled, dtype=np.uint8)
    return np.ascontiguousarray(a.reshape(elem_size, -1).T).tobytes()


def _arrow_codec(codec: int, level: int | None) -> pa.Codec:
    key = (codec, level)
    cache = getattr(_local, "codecs", None)
    if cache is None:
        cache = _local.codecs = {}
    c = cache.get(key)
    if c is None:
        name = "lz4_raw" if codec == CODEC_LZ4 else "zstd"
        c = cache[key] = pa.Codec(name, compression_level=level)
    return c


def _compress(codec: int, level: int | None, data: bytes) -> bytes:
    if codec == CODEC_DEFLATE:
        return zlib.compress(data, DEFAULT_LEVELS[CODEC_DEFLATE] if level is None else level)
    if codec in (CODEC_LZ4, CODEC_ZSTD):
        if codec == CODEC_ZSTD and level is None:
            level = DEFAULT_LEVELS[CODEC_ZSTD]
        lvl = None if codec == CODEC_LZ4 else level
        return bytes(_arrow_codec(codec, lvl).compress(data))
    raise CodecError(f"unknown codec {codec}")


def _decompress(codec: int, data: bytes, raw_len: int) -> bytes:
    try:
        if codec == CODEC_DEFLATE:
            out = zlib.decompress(data)
        elif codec in (CODEC_LZ4, CODEC_ZSTD):
            out = bytes(_arrow_codec(codec, None).decompress(data, decompressed_size=raw_len))
        else:
            raise CodecError(f"unknown codec {codec}")
    except CodecError:
        raise
    except Exception as exc:
        raise CodecError(f"codec {CODEC_NAMES.get(codec, codec)} failed: {exc}") from exc
    if len(out) != raw_len:
        raise CodecError(
            f"decompressed to {len(out)} bytes, header says {raw_len}"
        )
    return out


def encode_payload(payload: bytes, spec: OperatorSpec, elem_size: int) -> tuple[bytes, int, bool]:
    """Apply shuffle+codec; fall back to raw storage if the codec expands.

    Returns (stored_bytes, codec_id, shuffle_applied).
    """
    if spec.codec == CODEC_NONE:
        return payload, CODEC_NONE, False
    data = shuffle_bytes(payload, elem_size) if spec.shuffle else payload
    out = _compress(spec.codec, spec.level, data)
    if len(out) >= len(payload):
        return payload, CODEC_NONE, False
    return out, spec.codec, spec.shuffle


def decode_payload(stored: bytes, codec: int, shuffled: bool, raw_len: int, elem_size: int) -> bytes:
    if codec == CODEC_NONE:
        if len(stored) != raw_len:
            raise CodecError(f"raw block is {len(stored)} bytes, header says {raw_len}")
        return stored
    if codec not in CODEC_NAMES:
        raise CodecError(f"unknown codec {codec}")
    data = _decompress(codec, stored, raw_len)
    return unshuffle_bytes(data, elem_size) if shuffled else data


def build_block(
    var: VariableDef,
    step: int,
    selection: Selection,
    payload: bytes,
    spec: OperatorSpec,
    origin_rank: int = 0,
) -> DataBlock:
    """Compress a raw put payload into the block that travels and lands on disk."""
    stored, codec, shuf = encode_payload(payload, spec, var.dtype.itemsize)
    return DataBlock(
        var_id=var.var_id,
        step=step,
        start=selection.start,
        count=selection.count,
        dtype=var.dtype,
        raw_len=len(payload),
        codec_id=codec,
        shuffle=shuf,
        stored=stored,
        crc32=zlib.crc32(stored) & 0xFFFFFFFF,
        origin_rank=origin_rank,
    )


def decompress_block(block: DataBlock) -> bytes:
    return decode_payload(
        block.stored, block.codec_id, block.shuffle, block.raw_len, block.dtype.itemsize
    )


class OperatorTable:
    """Stream-level default spec with per-variable overrides, keyed by name."""

    def __init__(self, default: OperatorSpec | None = None, per_variable: dict[str, OperatorSpec] | None = None):
        self.default = default or OperatorSpec()
        self.per_variable = dict(per_variable or {})

    def for_variable(self, name: str) -> OperatorSpec:
        return self.per_variable.get(name, self.default)


class CompressionTotals:
    """Raw/stored byte accounting for ratio reports (headers excluded)."""

    def __init__(self):
        self._lock = threading.Lock()
        self.bytes_raw = 0
        self.bytes_stored = 0

    def add(self, raw: int, stored: int) -> None:
        with self._lock:
            self.bytes_raw += raw
            self.bytes_stored += stored

    def ratio(self) -> float:
        if self.bytes_stored == 0:
            return 1.0
        return self.bytes_raw / self.bytes_stored
