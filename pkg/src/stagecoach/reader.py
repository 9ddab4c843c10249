"""Reconstruct global arrays from published indices and sub-files.

The same assembly math serves the file reader here and the staging consumer:
intersect the request box with each block's box, then scatter the overlaps
into the output with row-major strided copies.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .container import GlobalIndex, IndexEntry, read_block, subfile_name
from .codecs import decompress_block
from .errors import (
    IncompleteStep,
    IoFailure,
    RankMismatch,
    StepNotFound,
    VariableNotFound,
)
from .model import Selection, VariableDef

Box = tuple[tuple[int, ...], tuple[int, ...]]  # (start, count)


def intersect(a: Box, b: Box) -> Box | None:
    """Overlap of two axis-aligned boxes; None when any dimension is empty."""
    (a_start, a_count), (b_start, b_count) = a, b
    if len(a_start) != len(b_start):
        raise RankMismatch(f"box ranks differ: {len(a_start)} vs {len(b_start)}")
    start = []
    count = []
    for s1, c1, s2, c2 in zip(a_start, a_count, b_start, b_count):
        lo = max(s1, s2)
        hi = min(s1 + c1, s2 + c2)
        if hi <= lo:
            return None
        start.append(lo)
        count.append(hi - lo)
    return tuple(start), tuple(count)


def tiles_exactly(global_shape: tuple[int, ...], boxes: list[Box]) -> bool:
    """Interval-arithmetic check: boxes cover the shape once, no gap or overlap."""
    total = 1
    for extent in global_shape:
        total *= extent
    vol = 0
    for start, count in boxes:
        if len(start) != len(global_shape):
            return False
        for s, c, g in zip(start, count, global_shape):
            if s < 0 or c < 1 or s + c > g:
                return False
        v = 1
        for c in count:
            v *= c
        vol += v
    if vol != total:
        return False
    for i in range(len(boxes)):
        for j in range(i + 1, len(boxes)):
            if intersect(boxes[i], boxes[j]) is not None:
                return False
    return True


@dataclass
class StepDescriptor:
    step: int
    complete: bool
    variables: dict[str, int]  # name -> raw bytes available this step
    bytes_stored: int


def scatter_blocks(
    var: VariableDef,
    selection: Selection,
    blocks: list[tuple[IndexEntry, bytes]],
) -> np.ndarray:
    """Assemble the selected region from (entry, raw payload) pairs."""
    if var.is_scalar:
        entry, payload = blocks[0]
        return np.frombuffer(payload, dtype=var.dtype.numpy).reshape(())
    out = np.empty(selection.count, dtype=var.dtype.numpy)
    req_box = (selection.start, selection.count)
    for entry, payload in blocks:
        overlap = intersect(req_box, (entry.start, entry.count))
        if overlap is None:
            continue
        ov_start, ov_count = overlap
        src = np.frombuffer(payload, dtype=var.dtype.numpy).reshape(entry.count)
        src_slices = tuple(
            slice(os - bs, os - bs + c)
            for os, bs, c in zip(ov_start, entry.start, ov_count)
        )
        dst_slices = tuple(
            slice(os - rs, os - rs + c)
            for os, rs, c in zip(ov_start, selection.start, ov_count)
        )
        out[dst_slices] = src[src_slices]
    return out


class FileReader:
    """Read surface over one published index directory.

    ``data_dirs`` lists every directory holding ``data.<m>`` sub-files; with
    burst-buffer runs left undrained they are the per-node bb dirs.
    """

    def __init__(self, index_dir, data_dirs=None):
        self.index_dir = Path(index_dir)
        self.data_dirs = [Path(d) for d in (data_dirs or [index_dir])]
        self.index = GlobalIndex.load(self.index_dir)
        self._subfile_cache: dict[int, Path] = {}

    def refresh(self) -> None:
        self.index = GlobalIndex.load(self.index_dir)

    def _subfile_path(self, subfile_id: int) -> Path:
        cached = self._subfile_cache.get(subfile_id)
        if cached is not None:
            return cached
        name = subfile_name(subfile_id)
        for d in self.data_dirs:
            p = d / name
            if p.exists():
                self._subfile_cache[subfile_id] = p
                return p
        raise IoFailure(f"sub-file {name} not found under {self.data_dirs}")

    def variable(self, name: str) -> VariableDef:
        var = self.index.by_name.get(name)
        if var is None:
            raise VariableNotFound(f"variable {name!r} not in index")
        return var

    def list_steps(self) -> list[StepDescriptor]:
        """Complete steps in ascending order with per-variable availability."""
        out = []
        for step in self.index.complete_steps():
            si = self.index.steps[step]
            per_var: dict[str, int] = {}
            stored = 0
            for e in si.entries:
                name = self.index.by_id[e.var_id].name
                per_var[name] = per_var.get(name, 0) + e.raw_len
                stored += e.stored_len
            out.append(StepDescriptor(step, si.complete, per_var, stored))
        return out

    def read_step(self, step: int, name: str, selection: Selection | None = None) -> np.ndarray:
        var = self.variable(name)
        si = self.index.steps.get(step)
        if si is None:
            raise StepNotFound(f"step {step} not published")
        if not si.complete:
            raise IncompleteStep(f"step {step} is incomplete")
        entries = [e for e in si.entries if e.var_id == var.var_id]
        if not entries:
            raise VariableNotFound(f"variable {name!r} not written in step {step}")
        if selection is None:
            selection = Selection.whole(var.global_shape)
        else:
            selection.validate_against(var.global_shape)
        req_box = (selection.start, selection.count)
        needed = []
        for e in entries:
            if var.is_scalar or intersect(req_box, (e.start, e.count)) is not None:
                payload = decompress_block(read_block(self._subfile_path(e.subfile_id), e))
                needed.append((e, payload))
        return scatter_blocks(var, selection, needed)
