import numpy as np
import pytest
from hypothesis import given, strategies as st

from stagecoach import FileReader, WorkloadSpec, intersect
from stagecoach.bench import run_workload
from stagecoach.errors import (
    IncompleteStep,
    RankMismatch,
    StepNotFound,
    VariableNotFound,
)
from stagecoach.model import Selection
from stagecoach.workload import generate_global


def test_intersect_example():
    got = intersect(((0, 0), (4, 4)), ((2, 2), (4, 4)))
    assert got == ((2, 2), (2, 2))


def test_intersect_disjoint():
    assert intersect(((0,), (4,)), ((4,), (4,))) is None
    assert intersect(((0, 0), (2, 2)), ((0, 5), (2, 2))) is None


def test_intersect_identity():
    box = ((1, 2), (3, 4))
    assert intersect(box, box) == box


def test_intersect_rank_mismatch():
    with pytest.raises(RankMismatch):
        intersect(((0,), (4,)), ((0, 0), (4, 4)))


@given(
    a_start=st.integers(0, 10), a_count=st.integers(1, 10),
    b_start=st.integers(0, 10), b_count=st.integers(1, 10),
)
def test_intersect_matches_set_oracle_1d(a_start, a_count, b_start, b_count):
    got = intersect(((a_start,), (a_count,)), ((b_start,), (b_count,)))
    cells = set(range(a_start, a_start + a_count)) & set(range(b_start, b_start + b_count))
    if not cells:
        assert got is None
    else:
        (s,), (c,) = got
        assert set(range(s, s + c)) == cells


def _run(tmp_path, spec, cfg, config_id="r"):
    return run_workload(spec, cfg, out_dir=tmp_path, config_id=config_id)[0]


def test_full_read_equals_single_writer_reference(tmp_path, unthrottled):
    """Differential: multi-rank multi-aggregator output vs an N=1 reference run."""
    base = dict(nx=24, ny=20, nz=4, n_3d_fields=1, n_2d_fields=1, steps=2, seed=33)
    multi = WorkloadSpec(px=2, py=2, nodes=2, ranks_per_node=2, **base)
    single = WorkloadSpec(px=1, py=1, nodes=1, ranks_per_node=1, **base)
    res_m = _run(tmp_path, multi, unthrottled, "multi")
    res_s = _run(tmp_path, single, unthrottled, "single")
    rm, rs = FileReader(res_m.index_dir), FileReader(res_s.index_dir)
    for step in range(2):
        for name in ("T", "T2", "XTIME"):
            assert rm.read_step(step, name).tobytes() == rs.read_step(step, name).tobytes()


def test_selection_reads_match_generator(tmp_path, unthrottled, small_spec):
    res = _run(tmp_path, small_spec, unthrottled)
    reader = FileReader(res.index_dir)
    want = generate_global(small_spec, "T", (8, 32, 32), 1)
    rng = np.random.default_rng(5)
    for _ in range(20):
        start = tuple(int(rng.integers(0, d)) for d in (8, 32, 32))
        count = tuple(int(rng.integers(1, d - s + 1)) for s, d in zip(start, (8, 32, 32)))
        sel = Selection(start, count)
        got = reader.read_step(1, "T", sel)
        slices = tuple(slice(s, s + c) for s, c in zip(start, count))
        np.testing.assert_array_equal(got, want[slices])


def test_selection_covering_exactly_one_block(tmp_path, unthrottled, small_spec):
    res = _run(tmp_path, small_spec, unthrottled)
    reader = FileReader(res.index_dir)
    # rank 0's patch of T2 under a 2x2 decomposition of (32, 32)
    sel = Selection((0, 0), (16, 16))
    got = reader.read_step(0, "T2", sel)
    want = generate_global(small_spec, "T2", (32, 32), 0)[:16, :16]
    np.testing.assert_array_equal(got, want)


def test_exactly_once_scatter_coverage(tmp_path, unthrottled, small_spec):
    """Instrumented write-count grid: every output element written once."""
    res = _run(tmp_path, small_spec, unthrottled)
    reader = FileReader(res.index_dir)
    var = reader.variable("T")
    counts = np.zeros(var.global_shape, dtype=np.int32)
    for e in reader.index.entries_for(0, var.var_id):
        slices = tuple(slice(s, s + c) for s, c in zip(e.start, e.count))
        counts[slices] += 1
    assert (counts == 1).all()


def test_reader_error_paths(tmp_path, unthrottled, small_spec):
    res = _run(tmp_path, small_spec, unthrottled)
    reader = FileReader(res.index_dir)
    with pytest.raises(VariableNotFound):
        reader.read_step(0, "NOPE")
    with pytest.raises(StepNotFound):
        reader.read_step(99, "T")
    with pytest.raises(IncompleteStep):
        # forge an incomplete step file and try to read it
        from stagecoach.container import publish_step_index
        publish_step_index(res.index_dir, 7, [], complete=False, n_writers=0)
        reader.refresh()
        reader.read_step(7, "T")


def test_list_steps_complete_only_with_totals(tmp_path, unthrottled, small_spec):
    res = _run(tmp_path, small_spec, unthrottled)
    from stagecoach.container import publish_step_index
    publish_step_index(res.index_dir, 9, [], complete=False, n_writers=1)
    reader = FileReader(res.index_dir)
    descs = reader.list_steps()
    assert [d.step for d in descs] == [0, 1]
    per_step_raw = small_spec.bytes_raw_per_step()
    for d in descs:
        assert sum(d.variables.values()) == per_step_raw
        assert d.bytes_stored > 0


def test_reading_never_mutates_disk(tmp_path, unthrottled, small_spec):
    res = _run(tmp_path, small_spec, unthrottled)
    files = sorted(p for d in res.data_dirs for p in d.glob("*") if p.is_file())
    before = [(p.name, p.read_bytes()) for p in files]
    reader = FileReader(res.index_dir)
    for d in reader.list_steps():
        for name in d.variables:
            reader.read_step(d.step, name)
    after = [(p.name, p.read_bytes()) for p in files]
    assert before == after


def test_empty_index_no_steps(tmp_path):
    from stagecoach.container import write_variable_table
    write_variable_table(tmp_path, [])
    reader = FileReader(tmp_path)
    assert reader.list_steps() == []
