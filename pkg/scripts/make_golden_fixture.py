#!/usr/bin/env python3
"""Regenerate the checked-in golden container fixture at tests/data/golden/.

The fixture pins the on-disk byte layout (little-endian, 100-byte headers,
length-prefixed index records) so any platform or refactor that changes the
format breaks tests/test_container.py::test_golden_fixture_decodes_identically.
"""

from pathlib import Path

import numpy as np

from stagecoach.codecs import CODEC_DEFLATE, CODEC_LZ4, CODEC_NONE, OperatorSpec, build_block
from stagecoach.container import SubfileWriter, publish_step_index, subfile_name, write_variable_table
from stagecoach.model import DType, Selection, VariableDef


class _Sink:
    def __init__(self, path):
        self._f = open(path, "wb")

    def write(self, b):
        self._f.write(b)

    def flush(self):
        self._f.flush()

    def close(self):
        self._f.close()


def main():
    out = Path(__file__).resolve().parent.parent / "tests" / "data" / "golden"
    out.mkdir(parents=True, exist_ok=True)

    variables = [
        VariableDef("T", DType.f32, (4, 6), 0),
        VariableDef("PSFC", DType.f64, (4,), 1),
        VariableDef("LEVELS", DType.i32, (5,), 2),
        VariableDef("FLAGS", DType.u8, (3,), 3),
        VariableDef("COUNTS", DType.i64, (2,), 4),
    ]
    payloads = {
        "T": (np.arange(24, dtype="<f4") * 0.5 + 250.0).tobytes(),
        "PSFC": np.array([1013.25, 1000.0, 990.5, 975.125], dtype="<f8").tobytes(),
        "LEVELS": np.array([1, 5, 10, 20, 50], dtype="<i4").tobytes(),
        "FLAGS": np.array([0, 1, 255], dtype="u1").tobytes(),
        "COUNTS": np.array([-7, 1 << 40], dtype="<i8").tobytes(),
    }
    specs = {
        "T": OperatorSpec(CODEC_DEFLATE, 6, True),
        "PSFC": OperatorSpec(CODEC_LZ4, None, False),
        "LEVELS": OperatorSpec(CODEC_NONE),
        "FLAGS": OperatorSpec(CODEC_NONE),
        "COUNTS": OperatorSpec(CODEC_DEFLATE, 6, False),
    }

    write_variable_table(out, variables)
    writer = SubfileWriter(0, _Sink(out / subfile_name(0)))
    entries = []
    for var in variables:
        block = build_block(var, 0, Selection.whole(var.global_shape),
                            payloads[var.name], specs[var.name], 0)
        entries.append(writer.append_block(block))
    writer.close()
    publish_step_index(out, 0, entries, complete=True, n_writers=1)
    print(f"golden fixture written to {out}")
    for p in sorted(out.iterdir()):
        print(f"  {p.name}: {p.stat().st_size} bytes")


if __name__ == "__main__":
    main()
