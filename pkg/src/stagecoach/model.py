"""Step-based data model shared by every engine.

A stream belongs to one simulated rank.  Writers declare variables once,
then repeat: begin_step / put / end_step.  Engines plug into the two hooks
``_submit_block`` and ``_flush_step``.
"""

from __future__ import annotations

import re
import threading
from dataclasses import dataclass
from enum import Enum

import numpy as np

from .errors import (
    DuplicateName,
    DuplicatePut,
    InvalidShape,
    NotOwner,
    SelectionOutOfBounds,
    SizeMismatch,
    StepAlreadyOpen,
    StepNotOpen,
)

MAX_RANK = 4
SCALAR_OWNER_RANK = 0

_NAME_RE = re.compile(r"^[A-Za-z_][A-Za-z0-9_]*$")


class DType(Enum):
    f32 = "f32"
    f64 = "f64"
    i32 = "i32"
    i64 = "i64"
    u8 = "u8"

    @property
    def itemsize(self) -> int:
        return _ITEMSIZE[self]

    @property
    def code(self) -> int:
        """Stable wire/disk id for this element type."""
        return _DTYPE_CODE[self]

    @property
    def numpy(self) -> np.dtype:
        return np.dtype(_NUMPY_NAME[self])

    @classmethod
    def from_code(cls, code: int) -> "DType":
        try:
            return _DTYPE_BY_CODE[code]
        except KeyError:
            raise InvalidShape(f"unknown dtype code {code}") from None


_ITEMSIZE = {DType.f32: 4, DType.f64: 8, DType.i32: 4, DType.i64: 8, DType.u8: 1}
_DTYPE_CODE = {DType.f32: 1, DType.f64: 2, DType.i32: 3, DType.i64: 4, DType.u8: 5}
_NUMPY_NAME = {
    DType.f32: "<f4",
    DType.f64: "<f8",
    DType.i32: "<i4",
    DType.i64: "<i8",
    DType.u8: "u1",
}
_DTYPE_BY_CODE = {v: k for k, v in _DTYPE_CODE.items()}


@dataclass(frozen=True)
class VariableDef:
    name: str
    dtype: DType
    global_shape: tuple[int, ...]
    var_id: int

    @property
    def ndim(self) -> int:
        return len(self.global_shape)

    @property
    def is_scalar(self) -> bool:
        return self.global_shape == ()

    @property
    def nbytes(self) -> int:
        n = self.dtype.itemsize
        for extent in self.global_shape:
            n *= extent
        return n


def validate_variable(name: str, dtype: DType, global_shape: tuple[int, ...]) -> None:
    if not _NAME_RE.match(name):
        raise InvalidShape(f"bad variable name {name!r}")
    if not isinstance(dtype, DType):
        raise InvalidShape(f"dtype must be a DType, got {dtype!r}")
    if len(global_shape) > MAX_RANK:
        raise InvalidShape(f"rank {len(global_shape)} exceeds maximum {MAX_RANK}")
    for extent in global_shape:
        if extent < 1:
            raise InvalidShape(f"zero or negative extent in shape {global_shape}")


@dataclass(frozen=True)
class Selection:
    start: tuple[int, ...]
    count: tuple[int, ...]

    def __post_init__(self):
        if len(self.start) != len(self.count):
            raise SelectionOutOfBounds(
                f"start rank {len(self.start)} != count rank {len(self.count)}"
            )

    @property
    def ndim(self) -> int:
        return len(self.start)

    @property
    def n_elements(self) -> int:
        n = 1
        for c in self.count:
            n *= c
        return n

    def validate_against(self, global_shape: tuple[int, ...]) -> None:
        if len(self.start) != len(global_shape):
            raise SelectionOutOfBounds(
                f"selection rank {len(self.start)} != variable rank {len(global_shape)}"
            )
        for d, (s, c, g) in enumerate(zip(self.start, self.count, global_shape)):
            if s < 0 or c < 1 or s + c > g:
                raise SelectionOutOfBounds(
                    f"dim {d}: start {s} count {c} outside extent {g}"
                )

    @classmethod
    def whole(cls, global_shape: tuple[int, ...]) -> "Selection":
        return cls(tuple(0 for _ in global_shape), tuple(global_shape))


@dataclass
class StepToken:
    step_index: int
    open: bool = True


@dataclass
class DataBlock:
    """One rank's payload for one variable at one step.

    ``stored`` holds the bytes as they travel and land on disk (post-codec);
    ``raw_len`` remembers the pre-codec size.  ``crc32`` covers ``stored``.
    """

    var_id: int
    step: int
    start: tuple[int, ...]
    count: tuple[int, ...]
    dtype: DType
    raw_len: int
    codec_id: int
    shuffle: bool
    stored: bytes
    crc32: int
    origin_rank: int = 0
    relay_count: int = 0

    @property
    def ndim(self) -> int:
        return len(self.count)

    @property
    def stored_len(self) -> int:
        return len(self.stored)


class WriterStream:
    """Begin/put/end lifecycle and validation for one simulated rank.

    Subclasses implement ``_submit_block`` (called per put) and
    ``_flush_step`` (called at end_step, returns once the step is durable
    or published).  All calls happen on the owning rank's worker.
    """

    def __init__(self, rank: int = 0):
        self.rank = rank
        self._variables: dict[str, VariableDef] = {}
        self._next_step = 0
        self._token: StepToken | None = None
        self._put_this_step: set[int] = set()
        self._closed = False
        self._lock = threading.Lock()

    # -- variable registry hooks (engine overrides _register) --------------

    def declare_variable(
        self, name: str, dtype: DType, global_shape
    ) -> VariableDef:
        shape = tuple(int(x) for x in global_shape)
        validate_variable(name, dtype, shape)
        with self._lock:
            if name in self._variables:
                raise DuplicateName(f"variable {name!r} already declared")
            var = self._register(name, dtype, shape)
            self._variables[name] = var
        return var

    def _register(self, name: str, dtype: DType, shape: tuple[int, ...]) -> VariableDef:
        return VariableDef(name, dtype, shape, var_id=len(self._variables))

    def variable(self, name: str) -> VariableDef:
        return self._variables[name]

    # -- step lifecycle -----------------------------------------------------

    def begin_step(self) -> StepToken:
        if self._token is not None and self._token.open:
            raise StepAlreadyOpen(f"step {self._token.step_index} still open")
        self._token = StepToken(self._next_step)
        self._put_this_step.clear()
        return self._token

    def end_step(self, token: StepToken | None = None) -> None:
        if self._token is None or not self._token.open:
            raise StepNotOpen("no step open")
        if token is not None and token is not self._token:
            raise StepNotOpen("token does not match the open step")
        step = self._token.step_index
        self._token.open = False
        self._next_step = step + 1
        self._flush_step(step)

    @property
    def current_step(self) -> int | None:
        if self._token is not None and self._token.open:
            return self._token.step_index
        return None

    # -- put ------------------------------------------------------------------

    def put(self, var, payload, selection: Selection | None = None) -> None:
        if self._token is None or not self._token.open:
            raise StepNotOpen("put outside an open step")
        if isinstance(var, str):
            var = self._variables[var]
        if var.is_scalar:
            if self.rank != SCALAR_OWNER_RANK:
                raise NotOwner(
                    f"scalar {var.name!r} may only be written by rank {SCALAR_OWNER_RANK}"
                )
            selection = Selection((), ())
        elif selection is None:
            selection = Selection.whole(var.global_shape)
        selection.validate_against(var.global_shape)

        data = _as_payload_bytes(payload, var.dtype)
        expected = selection.n_elements * var.dtype.itemsize
        if len(data) != expected:
            raise SizeMismatch(
                f"{var.name}: payload {len(data)} bytes, selection needs {expected}"
            )
        if var.var_id in self._put_this_step:
            raise DuplicatePut(f"{var.name!r} already put in step {self._token.step_index}")
        self._put_this_step.add(var.var_id)
        self._submit_block(var, selection, data)

    # -- engine hooks ---------------------------------------------------------

    def _submit_block(self, var: VariableDef, selection: Selection, payload: bytes):
        raise NotImplementedError

    def _flush_step(self, step: int) -> None:
        raise NotImplementedError

    def close(self) -> None:
        self._closed = True


def _as_payload_bytes(payload, dtype: DType) -> bytes:
    """Snapshot the caller's buffer; the caller may reuse it afterwards."""
    if isinstance(payload, np.ndarray):
        return np.ascontiguousarray(payload, dtype=dtype.numpy).tobytes()
    return bytes(payload)
