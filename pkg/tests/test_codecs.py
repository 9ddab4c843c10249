import zlib

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from stagecoach.codecs import (
    CODEC_DEFLATE,
    CODEC_LZ4,
    CODEC_NONE,
    CODEC_ZSTD,
    CompressionTotals,
    OperatorSpec,
    build_block,
    decode_payload,
    decompress_block,
    encode_payload,
    shuffle_bytes,
    unshuffle_bytes,
)
from stagecoach.errors import CodecError, SizeNotMultiple
from stagecoach.model import DType, Selection, VariableDef

REAL_CODECS = [CODEC_LZ4, CODEC_DEFLATE, CODEC_ZSTD]


def shuffle_oracle(payload: bytes, es: int) -> bytes:
    """Index formula: byte j of element i lands at j*n_elems + i."""
    n = len(payload) // es
    out = bytearray(len(payload))
    for i in range(n):
        for j in range(es):
            out[j * n + i] = payload[i * es + j]
    return bytes(out)


def test_shuffle_identity_for_single_byte_elements():
    data = bytes(range(16))
    assert shuffle_bytes(data, 1) == data


def test_shuffle_u16_example():
    assert shuffle_bytes(bytes([0x02, 0x01, 0x04, 0x03]), 2) == bytes([0x02, 0x04, 0x01, 0x03])


@pytest.mark.parametrize("es", [1, 4, 8])
def test_shuffle_matches_index_formula(es):
    data = np.random.default_rng(3).bytes(es * 37)
    assert shuffle_bytes(data, es) == shuffle_oracle(data, es)


@given(st.binary(min_size=0, max_size=512), st.sampled_from([1, 2, 4, 8]))
def test_unshuffle_inverts_shuffle(data, es):
    data = data[: len(data) - len(data) % es]
    assert unshuffle_bytes(shuffle_bytes(data, es), es) == data


def test_shuffle_size_not_multiple():
    with pytest.raises(SizeNotMultiple):
        shuffle_bytes(b"\x00" * 7, 4)


@settings(deadline=None, max_examples=60)
@given(
    data=st.binary(min_size=0, max_size=4096),
    codec=st.sampled_from(REAL_CODECS + [CODEC_NONE]),
    shuffle=st.booleans(),
    es=st.sampled_from([1, 4, 8]),
)
def test_codecs_lossless(data, codec, shuffle, es):
    data = data[: len(data) - len(data) % es]
    spec = OperatorSpec(codec, None, shuffle)
    stored, cid, shuf = encode_payload(data, spec, es)
    assert decode_payload(stored, cid, shuf, len(data), es) == data
    assert len(stored) <= len(data) or len(data) == 0


@pytest.mark.parametrize("codec", REAL_CODECS)
@pytest.mark.parametrize("level", [None, 1])
def test_lossless_on_structured_payloads(codec, level):
    rng = np.random.default_rng(9)
    fields = [
        np.linspace(0, 1, 4096, dtype=np.float32).tobytes(),
        rng.normal(287, 3, 2048).astype(np.float64).tobytes(),
        rng.integers(0, 255, 8192, dtype=np.uint8).tobytes(),
    ]
    for es, data in zip([4, 8, 1], fields):
        for shuffle in (False, True):
            spec = OperatorSpec(codec, level, shuffle)
            stored, cid, shuf = encode_payload(data, spec, es)
            assert decode_payload(stored, cid, shuf, len(data), es) == data


def test_codec_none_stores_raw():
    data = b"abcd" * 16
    stored, cid, shuf = encode_payload(data, OperatorSpec(CODEC_NONE), 4)
    assert stored == data and cid == CODEC_NONE and shuf is False


@pytest.mark.parametrize("codec", REAL_CODECS)
def test_constant_field_ratio(codec):
    data = np.full(262144, 287.15, dtype=np.float32).tobytes()  # 1 MiB
    stored, cid, _ = encode_payload(data, OperatorSpec(codec, None, True), 4)
    assert cid == codec
    assert len(data) / len(stored) >= 20


@pytest.mark.parametrize("codec", REAL_CODECS)
def test_store_raw_fallback_on_incompressible_data(codec):
    data = np.random.default_rng(0).bytes(65536)
    stored, cid, shuf = encode_payload(data, OperatorSpec(codec, None, False), 4)
    assert len(stored) <= len(data)
    if cid == CODEC_NONE:  # fallback taken: raw bytes, shuffle recorded off
        assert stored == data and shuf is False


def test_unknown_codec_on_decode():
    with pytest.raises(CodecError, match="unknown codec 255"):
        decode_payload(b"xx", 255, False, 2, 1)


@pytest.mark.parametrize("codec", [CODEC_DEFLATE, CODEC_ZSTD])
def test_corrupt_stream_raises_codec_error(codec):
    data = np.linspace(0, 1, 1024, dtype=np.float32).tobytes()
    stored, cid, shuf = encode_payload(data, OperatorSpec(codec), 4)
    assert cid == codec
    corrupt = bytes([stored[0] ^ 0xFF]) + stored[1:]
    with pytest.raises(CodecError):
        decode_payload(corrupt, cid, shuf, len(data), 4)


@pytest.mark.parametrize("codec", REAL_CODECS)
def test_truncated_stream_raises_codec_error(codec):
    # lz4 blocks carry no internal checksum (the container CRC covers them),
    # but a truncated stream can never fill raw_len
    data = (b"\x11\x22\x33\x44" * 1024) + bytes(range(256))
    stored, cid, shuf = encode_payload(data, OperatorSpec(codec), 4)
    assert cid == codec
    with pytest.raises(CodecError):
        decode_payload(stored[: len(stored) // 2], cid, shuf, len(data), 4)


def test_ratio_arithmetic():
    t = CompressionTotals()
    t.add(400, 100)
    assert t.ratio() == 4.0
    t2 = CompressionTotals()
    t2.add(256, 256)
    assert t2.ratio() == 1.0


def test_ratio_all_fallback_is_exactly_one():
    t = CompressionTotals()
    rng = np.random.default_rng(1)
    for _ in range(4):
        data = rng.bytes(4096)
        stored, cid, _ = encode_payload(data, OperatorSpec(CODEC_LZ4), 1)
        assert cid == CODEC_NONE
        t.add(len(data), len(stored))
    assert t.ratio() == 1.0


def test_build_block_crc_is_standard_crc32():
    var = VariableDef("C", DType.u8, (9,), 0)
    block = build_block(var, 0, Selection((0,), (9,)), b"123456789", OperatorSpec(), 0)
    assert block.crc32 == 0xCBF43926  # standard CRC-32 check vector
    assert block.crc32 == zlib.crc32(b"123456789") & 0xFFFFFFFF
    assert decompress_block(block) == b"123456789"
