import threading
import time

import numpy as np
import pytest

from stagecoach import EngineConfig, FileReader, FileWriteEngine, WorkloadSpec
from stagecoach.bench import run_workload
from stagecoach.errors import InvalidShape, TransportFailure
from stagecoach.model import DType, Selection
from stagecoach.reader import tiles_exactly
from stagecoach.shim import StorageTarget
from stagecoach.topology import RankTopology, assign_aggregators, funnel_assignment


def make_engine(tmp_path, n_nodes=1, rpn=4, app=1, gather=False, funnel=False, **kw):
    topo = RankTopology.uniform(n_nodes, rpn)
    assignment = funnel_assignment(topo) if funnel else assign_aggregators(topo, app)
    target = StorageTarget(tmp_path / "out").ensure()
    return FileWriteEngine(topo, assignment, data_target=target,
                           gather=gather or funnel, **kw)


def write_simple(engine, world, shape=(8, 8), steps=1, py=None):
    """Each rank writes one row-band of a (py*k, 8) grid per step."""
    py = py or world
    rows = shape[0] // py

    def body(rank):
        s = engine.stream(rank)
        v = s.declare_variable("A", DType.f32, shape)
        for step in range(steps):
            s.begin_step()
            sel = Selection((rank * rows, 0), (rows, shape[1]))
            payload = np.full((rows, shape[1]), rank * 100 + step, np.float32).tobytes()
            s.put(v, payload, sel)
            s.end_step()
        s.close()

    threads = [threading.Thread(target=body, args=(r,)) for r in range(world)]
    for t in threads:
        t.start()
    for t in threads:
        t.join()


def test_block_placement_follows_assignment(tmp_path):
    """Wherever the chain timing lands, rank r's block is in assignment(r)'s sub-file."""
    engine = make_engine(tmp_path, n_nodes=2, rpn=4, app=2)
    recorded = {}
    for agg in engine.aggregators.values():
        orig = agg.writer.append_block

        def wrap(block, _orig=orig, _sid=agg.subfile_id):
            recorded.setdefault(_sid, []).append(block.origin_rank)
            return _orig(block)

        agg.writer.append_block = wrap

    world = 8

    def body(rank):
        s = engine.stream(rank)
        v = s.declare_variable("A", DType.f32, (8, 8))
        s.begin_step()
        time.sleep(np.random.default_rng(rank).uniform(0, 0.02))  # randomized schedule
        s.put(v, np.full((1, 8), rank, np.float32).tobytes(), Selection((rank, 0), (1, 8)))
        s.end_step()
        s.close()

    threads = [threading.Thread(target=body, args=(r,)) for r in range(world)]
    for t in threads:
        t.start()
    for t in threads:
        t.join()
    engine.close()

    assignment = engine.assignment
    for sid, origins in recorded.items():
        agg_rank = assignment.aggregators[sid]
        assert set(origins) == set(assignment.groups[agg_rank])


@pytest.mark.parametrize("nodes,rpn,app", [(1, 4, 1), (1, 4, 2), (1, 4, 4),
                                           (2, 4, 1), (2, 4, 2), (2, 2, 1)])
def test_file_count_equals_m(tmp_path, nodes, rpn, app):
    engine = make_engine(tmp_path, n_nodes=nodes, rpn=rpn, app=app)
    write_simple(engine, nodes * rpn, shape=(nodes * rpn, 8), py=nodes * rpn)
    engine.close()
    files = list((tmp_path / "out").glob("data.*"))
    assert len(files) == nodes * app == engine.n_subfiles


def test_reconstruction_invariant_across_m(tmp_path, unthrottled):
    """Same inputs, every legal M: reader output bit-identical."""
    spec = WorkloadSpec(nx=24, ny=16, nz=4, n_3d_fields=1, n_2d_fields=1,
                        steps=2, px=2, py=2, nodes=1, ranks_per_node=4, seed=11)
    outputs = []
    for app in (1, 2, 4):
        cfg_kw = dict(unthrottled.__dict__)
        cfg_kw.update(aggregators_per_node=app)
        cfg = EngineConfig(**cfg_kw)
        res = run_workload(spec, cfg, out_dir=tmp_path, config_id=f"m{app}")[0]
        reader = FileReader(res.index_dir)
        outputs.append(tuple(
            reader.read_step(step, name).tobytes()
            for step in range(2) for name in ("T", "T2")
        ))
    assert outputs[0] == outputs[1] == outputs[2]


def test_streaming_memory_bound_vs_funnel_gather(tmp_path):
    """Aggregator high-water: < 2 x largest block streaming; ~N x block in funnel."""
    shape = (8, 1024)  # 8 ranks x 32 KiB blocks
    block_bytes = 1024 * 4

    engine = make_engine(tmp_path, n_nodes=1, rpn=8, app=1)
    write_simple(engine, 8, shape=shape, py=8)
    engine.close()
    hw = max(engine.memory_high_water().values())
    assert hw <= 2 * block_bytes + 4096

    funnel = make_engine(tmp_path / "f", n_nodes=1, rpn=8, funnel=True)
    write_simple(funnel, 8, shape=shape, py=8)
    funnel.close()
    hw_funnel = max(funnel.memory_high_water().values())
    assert hw_funnel >= 8 * block_bytes  # gather-then-write holds the whole step


def test_hop_counts_along_chain(tmp_path):
    """Chain 0<-1<-2<-3: rank 3's block is relayed twice; rank 0's not at all."""
    engine = make_engine(tmp_path, n_nodes=1, rpn=4, app=1)
    relays = {}
    agg = engine.aggregators[0]
    orig = agg.writer.append_block

    def wrap(block, _orig=orig):
        relays[block.origin_rank] = block.relay_count
        return _orig(block)

    agg.writer.append_block = wrap
    write_simple(engine, 4, shape=(4, 8), py=4)
    engine.close()
    assert relays == {0: 0, 1: 0, 2: 1, 3: 2}


def test_entries_tile_global_shape(tmp_path, unthrottled, small_spec):
    res = run_workload(small_spec, unthrottled, out_dir=tmp_path, config_id="t")[0]
    reader = FileReader(res.index_dir)
    for step in (0, 1):
        for name in ("T", "T2"):
            var = reader.variable(name)
            boxes = [(e.start, e.count) for e in reader.index.entries_for(step, var.var_id)]
            assert tiles_exactly(var.global_shape, boxes)


def test_killed_neighbor_surfaces_transport_failure(tmp_path):
    engine = make_engine(tmp_path, n_nodes=1, rpn=4, app=1)
    world = 4
    errors = []
    started = threading.Barrier(world)

    def body(rank):
        try:
            s = engine.stream(rank)
            v = s.declare_variable("A", DType.f32, (4, 8))
            s.begin_step()
            started.wait()
            if rank == 3:
                return  # dies before putting anything
            s.put(v, np.zeros((1, 8), np.float32).tobytes(), Selection((rank, 0), (1, 8)))
            s.end_step()
        except TransportFailure as exc:
            errors.append((rank, exc))

    threads = [threading.Thread(target=body, args=(r,)) for r in range(world)]
    for t in threads:
        t.start()
    time.sleep(0.1)
    engine.kill_rank(3)
    for t in threads:
        t.join()
    assert errors, "survivors should fail at end_step"
    engine.close()


def test_partial_step_published_incomplete(tmp_path):
    """3 of 4 ranks reported at close -> complete=false, reads refused."""
    from stagecoach.errors import IncompleteStep

    engine = make_engine(tmp_path, n_nodes=1, rpn=4, app=4)  # fpp-like: no chains
    world = 4

    def body(rank):
        try:
            s = engine.stream(rank)
            v = s.declare_variable("A", DType.f32, (4, 8))
            s.begin_step()
            s.put(v, np.zeros((1, 8), np.float32).tobytes(), Selection((rank, 0), (1, 8)))
            if rank == 3:
                return  # never reaches end_step
            s.end_step()
            s.close()
        except TransportFailure:
            pass

    threads = [threading.Thread(target=body, args=(r,)) for r in range(world)]
    for t in threads:
        t.start()
    time.sleep(0.3)
    engine.kill_rank(3)
    for t in threads:
        t.join()
    engine.close()

    reader = FileReader(tmp_path / "out")
    si = reader.index.steps[0]
    assert not si.complete
    assert si.n_writers == 3
    with pytest.raises(IncompleteStep):
        reader.read_step(0, "A")


def test_inconsistent_declaration_rejected(tmp_path):
    engine = make_engine(tmp_path, n_nodes=1, rpn=2, app=1)
    s0, s1 = engine.stream(0), engine.stream(1)
    s0.declare_variable("A", DType.f32, (4, 4))
    with pytest.raises(InvalidShape):
        s1.declare_variable("A", DType.f64, (4, 4))
    s0.close()
    s1.close()
    engine.close()


def test_codec_choice_does_not_change_reader_values(tmp_path, unthrottled):
    spec = WorkloadSpec(nx=16, ny=16, nz=4, n_3d_fields=1, n_2d_fields=0,
                        steps=1, px=2, py=1, nodes=1, ranks_per_node=2, seed=3)
    seen = set()
    for codec in ("none", "lz4", "deflate", "zstd"):
        cfg_kw = dict(unthrottled.__dict__)
        cfg_kw.update(codec=codec, shuffle=codec != "none")
        res = run_workload(spec, EngineConfig(**cfg_kw), out_dir=tmp_path,
                           config_id=f"c{codec}")[0]
        seen.add(FileReader(res.index_dir).read_step(0, "T").tobytes())
    assert len(seen) == 1
