import numpy as np
import pytest
from hypothesis import given, strategies as st

from stagecoach.errors import (
    DuplicateName,
    DuplicatePut,
    InvalidShape,
    NotOwner,
    SelectionOutOfBounds,
    SizeMismatch,
    StepAlreadyOpen,
    StepNotOpen,
)
from stagecoach.model import DType, Selection, WriterStream

# independent element-size table (the dtype oracle)
ELEM_SIZES = {"f32": 4, "f64": 8, "i32": 4, "i64": 8, "u8": 1}


class CaptureStream(WriterStream):
    """Records submitted blocks; flush is a no-op."""

    def __init__(self, rank=0):
        super().__init__(rank)
        self.blocks = []
        self.flushed = []

    def _submit_block(self, var, selection, payload):
        self.blocks.append((var, selection, payload))

    def _flush_step(self, step):
        self.flushed.append(step)


def test_dtype_sizes_match_oracle():
    for dt in DType:
        assert dt.itemsize == ELEM_SIZES[dt.value]
        assert dt.itemsize in (1, 4, 8)
        assert DType.from_code(dt.code) is dt


def test_declare_registers_variable():
    s = CaptureStream()
    v = s.declare_variable("T2", DType.f32, [300, 300])
    assert v.global_shape == (300, 300)
    assert v.ndim == 2
    assert not v.is_scalar


def test_declare_duplicate_name():
    s = CaptureStream()
    s.declare_variable("T2", DType.f32, [300, 300])
    with pytest.raises(DuplicateName):
        s.declare_variable("T2", DType.f32, [300, 300])


def test_declare_rank3_element_size():
    s = CaptureStream()
    v = s.declare_variable("P", DType.f64, [35, 1000, 1500])
    assert v.ndim == 3
    assert v.dtype.itemsize == ELEM_SIZES["f64"]
    assert v.nbytes == 35 * 1000 * 1500 * 8


@pytest.mark.parametrize("shape", [[0], [4, 0], [-1, 3], [2, 2, 2, 2, 2]])
def test_declare_invalid_shapes(shape):
    s = CaptureStream()
    with pytest.raises(InvalidShape):
        s.declare_variable("X", DType.f32, shape)


def test_declare_bad_name():
    s = CaptureStream()
    with pytest.raises(InvalidShape):
        s.declare_variable("2fast", DType.f32, [4])


def test_begin_end_lifecycle():
    s = CaptureStream()
    t = s.begin_step()
    assert t.step_index == 0
    with pytest.raises(StepAlreadyOpen):
        s.begin_step()
    s.end_step(t)
    assert s.begin_step().step_index == 1
    with pytest.raises(StepNotOpen):
        s.end_step()
        s.end_step()


@given(st.lists(st.sampled_from(["begin", "end"]), max_size=60))
def test_step_indices_monotone_no_gaps(ops):
    """Whatever the call pattern, observed step indices are 0,1,2,..."""
    s = CaptureStream()
    seen = []
    for op in ops:
        if op == "begin":
            try:
                seen.append(s.begin_step().step_index)
            except StepAlreadyOpen:
                pass
        else:
            try:
                s.end_step()
            except StepNotOpen:
                pass
    assert seen == list(range(len(seen)))


def test_put_whole_array():
    s = CaptureStream()
    v = s.declare_variable("A", DType.f32, [4, 4])
    s.begin_step()
    s.put(v, b"\x00" * 64, Selection((0, 0), (4, 4)))
    assert len(s.blocks) == 1


def test_put_size_mismatch():
    s = CaptureStream()
    v = s.declare_variable("A", DType.f32, [4, 4])
    s.begin_step()
    with pytest.raises(SizeMismatch):
        s.put(v, b"\x00" * 60, Selection((0, 0), (4, 4)))


def test_put_selection_out_of_bounds():
    s = CaptureStream()
    v = s.declare_variable("A", DType.f32, [4, 4])
    s.begin_step()
    with pytest.raises(SelectionOutOfBounds):
        s.put(v, b"\x00" * 36, Selection((2, 2), (3, 3)))


def test_put_outside_step():
    s = CaptureStream()
    v = s.declare_variable("A", DType.f32, [4])
    with pytest.raises(StepNotOpen):
        s.put(v, b"\x00" * 16)


def test_put_twice_same_step():
    s = CaptureStream()
    v = s.declare_variable("A", DType.f32, [4])
    s.begin_step()
    s.put(v, b"\x00" * 16)
    with pytest.raises(DuplicatePut):
        s.put(v, b"\x01" * 16)
    s.end_step()
    s.begin_step()
    s.put(v, b"\x01" * 16)  # fresh step is fine


def test_put_snapshots_caller_buffer():
    s = CaptureStream()
    v = s.declare_variable("A", DType.u8, [8])
    s.begin_step()
    buf = bytearray(b"\x07" * 8)
    s.put(v, buf)
    buf[:] = b"\xff" * 8  # caller reuses its buffer
    assert s.blocks[0][2] == b"\x07" * 8


def test_put_accepts_ndarray_and_converts_layout():
    s = CaptureStream()
    v = s.declare_variable("A", DType.f32, [2, 3])
    s.begin_step()
    arr = np.arange(6, dtype=np.float32).reshape(2, 3)
    s.put(v, arr.T.T)  # any view; snapshot must be row-major
    assert s.blocks[0][2] == arr.tobytes()


def test_scalar_ownership():
    s0 = CaptureStream(rank=0)
    v = s0.declare_variable("XTIME", DType.f64, [])
    assert v.is_scalar
    s0.begin_step()
    s0.put(v, np.float64(30.0).tobytes())
    assert len(s0.blocks) == 1

    s1 = CaptureStream(rank=1)
    v1 = s1.declare_variable("XTIME", DType.f64, [])
    s1.begin_step()
    with pytest.raises(NotOwner):
        s1.put(v1, np.float64(30.0).tobytes())
