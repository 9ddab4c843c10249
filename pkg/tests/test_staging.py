import socket
import struct
import threading
import time

import numpy as np
import pytest

from stagecoach import EngineConfig, FileReader, StagingConsumer, WorkloadSpec
from stagecoach.bench import build_engine, drive_ranks, run_workload
from stagecoach.model import DType, Selection
from stagecoach.staging import (
    MSG_BLOCK_DATA,
    MSG_BLOCK_REQUEST,
    MSG_ERROR,
    MSG_HELLO,
    OverlapStats,
    StagingEngine,
    pipeline_overlap_report,
    read_frame,
    write_frame,
)

LOCAL = "127.0.0.1:0"


def single_rank_producer(n_steps, max_steps=8, policy="block", shape=(4,), payload_of=None):
    engine = StagingEngine(LOCAL, world_size=1, max_steps=max_steps, policy=policy)
    s = engine.stream(0)
    v = s.declare_variable("A", DType.f32, shape)
    n = int(np.prod(shape))
    for step in range(n_steps):
        s.begin_step()
        data = payload_of(step) if payload_of else np.full(n, step, np.float32).tobytes()
        s.put(v, data)
        s.end_step()
    s.close()
    return engine


def test_buffered_steps_delivered_in_order_after_late_attach():
    engine = single_rank_producer(4, max_steps=8)
    assert len(engine.queue) == 4  # all buffered, no consumer yet
    got = []
    with StagingConsumer(engine.endpoint) as c:
        for step in c.steps():
            got.append(step.step)
            np.testing.assert_array_equal(
                c.get("A"), np.full(4, step.step, np.float32))
    engine.close(timeout=10)
    assert got == [0, 1, 2, 3]


def test_discard_oldest_drops_and_logs():
    engine = single_rank_producer(4, max_steps=2, policy="discard_oldest")
    assert engine.queue.dropped_steps == [0, 1]
    got = []
    with StagingConsumer(engine.endpoint) as c:
        for step in c.steps():
            got.append(step.step)
    engine.close(timeout=10)
    assert got == [2, 3]
    assert got == sorted(got)  # strictly increasing delivery


def test_block_policy_backpressure_engages_at_max_steps():
    """With max_steps=2, the third end_step blocks until the consumer releases."""
    engine = StagingEngine(LOCAL, world_size=1, max_steps=2, policy="block")
    release_gate = threading.Event()
    stamps = {}

    def produce():
        s = engine.stream(0)
        v = s.declare_variable("A", DType.f32, (1024,))
        for step in range(3):
            s.begin_step()
            s.put(v, np.full(1024, step, np.float32).tobytes())
            t0 = time.monotonic()
            s.end_step()
            stamps[step] = (t0, time.monotonic())
        s.close()

    t = threading.Thread(target=produce, daemon=True)
    t.start()
    time.sleep(0.4)  # producer should now be stuck inside end_step of step 2
    assert 2 not in stamps or stamps[2][1] - stamps[2][0] > 0.2
    consumed = []

    def consume():
        with StagingConsumer(engine.endpoint) as c:
            release_gate.wait()
            for step in c.steps():
                consumed.append(step.step)

    tc = threading.Thread(target=consume, daemon=True)
    tc.start()
    time.sleep(0.2)
    release_gate.set()
    t.join(timeout=10)
    tc.join(timeout=10)
    engine.close(timeout=10)
    assert not t.is_alive()
    assert consumed == [0, 1, 2]
    blocked = stamps[2][1] - stamps[2][0]
    assert blocked > 0.4  # held until the first release freed a slot


def test_queue_memory_accounting_bounded():
    payload = np.zeros(4096, np.float32).tobytes()
    engine = single_rank_producer(6, max_steps=8, shape=(4096,),
                                  payload_of=lambda step: payload)
    hw = engine.queue.high_water_bytes
    assert hw <= 8 * len(payload) + 4096
    assert hw >= 6 * len(payload)  # all six buffered while unattached
    with StagingConsumer(engine.endpoint) as c:
        for _ in c.steps():
            pass
    engine.close(timeout=10)
    assert engine.queue.current_bytes == 0


def test_transport_invariance_vs_file_engine(tmp_path, unthrottled):
    """Consumer-reconstructed arrays are bit-identical to file engine output."""
    spec = WorkloadSpec(nx=32, ny=24, nz=6, n_3d_fields=2, n_2d_fields=1,
                        steps=3, px=2, py=2, nodes=1, ranks_per_node=4, seed=77)
    file_res = run_workload(spec, unthrottled, out_dir=tmp_path, config_id="file")[0]
    file_reader = FileReader(file_res.index_dir)

    cfg = EngineConfig(engine="staging", endpoint=LOCAL, codec="zstd", shuffle=True,
                       pfs_rate_bytes_per_sec=None, fabric_rate_bytes_per_sec=None)
    ctx = build_engine(spec, cfg, tmp_path)
    staged = {}

    def consume():
        with StagingConsumer(ctx.engine.endpoint) as c:
            for step in c.steps():
                staged[step.step] = {n: c.get(n) for n in c.available_variables()}

    t = threading.Thread(target=consume, daemon=True)
    t.start()
    drive_ranks(spec, ctx.engine)
    ctx.engine.close(timeout=30)
    t.join(timeout=30)

    assert sorted(staged) == [0, 1, 2]
    for step in range(3):
        for name in ("T", "P", "T2", "XTIME"):
            want = file_reader.read_step(step, name)
            np.testing.assert_array_equal(staged[step][name], want)
            assert staged[step][name].tobytes() == want.tobytes()


def test_selective_request_only_fetches_wanted_variable():
    engine = StagingEngine(LOCAL, world_size=1)
    s = engine.stream(0)
    va = s.declare_variable("A", DType.f32, (64,))
    vb = s.declare_variable("B", DType.f32, (64,))
    s.begin_step()
    s.put(va, np.zeros(64, np.float32).tobytes())
    s.put(vb, np.ones(64, np.float32).tobytes())
    s.end_step()
    s.close()
    with StagingConsumer(engine.endpoint) as c:
        step = c.begin_step()
        c.get("B")
        c.end_step()
        requests = [m for m in c.message_log if m[0] == "send" and m[1] == MSG_BLOCK_REQUEST]
        data = [m for m in c.message_log if m[0] == "recv" and m[1] == MSG_BLOCK_DATA]
    engine.close(timeout=10)
    assert len(requests) == 1
    assert len(data) == 1  # only B's single block crossed the wire


def test_consumer_slice_selection():
    spec_shape = (4, 8, 8)
    engine = StagingEngine(LOCAL, world_size=1)
    s = engine.stream(0)
    v = s.declare_variable("T", DType.f32, spec_shape)
    arr = np.arange(np.prod(spec_shape), dtype=np.float32).reshape(spec_shape)
    s.begin_step()
    s.put(v, arr.tobytes())
    s.end_step()
    s.close()
    with StagingConsumer(engine.endpoint) as c:
        c.begin_step()
        got = c.get("T", Selection((2, 0, 0), (1, 8, 8)))
        c.end_step()
    engine.close(timeout=10)
    np.testing.assert_array_equal(got, arr[2:3])


def test_end_of_stream_clean():
    engine = single_rank_producer(1)
    with StagingConsumer(engine.endpoint) as c:
        assert c.begin_step() is not None
        c.end_step()
        assert c.begin_step() is None
        assert c.begin_step() is None  # stays ended
    engine.close(timeout=10)


def test_hello_version_mismatch_rejected():
    engine = single_rank_producer(1)
    host, port = engine.endpoint.rsplit(":", 1)
    with socket.create_connection((host, int(port)), timeout=5) as sock:
        write_frame(sock, MSG_HELLO, struct.pack("<4sH", b"SCST", 99))
        msg_type, body = read_frame(sock)
        assert msg_type == MSG_ERROR
    # producer keeps serving; a good consumer still works
    with StagingConsumer(engine.endpoint) as c:
        assert c.begin_step().step == 0
        c.end_step()
        assert c.begin_step() is None
    engine.close(timeout=10)


def test_hello_bad_magic_rejected():
    engine = single_rank_producer(0)
    host, port = engine.endpoint.rsplit(":", 1)
    with socket.create_connection((host, int(port)), timeout=5) as sock:
        write_frame(sock, MSG_HELLO, struct.pack("<4sH", b"XXXX", 1))
        msg_type, _ = read_frame(sock)
        assert msg_type == MSG_ERROR
    engine.close(timeout=10)


def test_exactly_once_ordered_delivery_many_steps():
    """12 steps through a 4-deep queue: backpressure on, each delivered once, in order."""
    engine = StagingEngine(LOCAL, world_size=1, max_steps=4, policy="block")

    def produce():
        s = engine.stream(0)
        v = s.declare_variable("A", DType.f32, (4,))
        for step in range(12):
            s.begin_step()
            s.put(v, np.full(4, step, np.float32).tobytes())
            s.end_step()
        s.close()

    t = threading.Thread(target=produce, daemon=True)
    t.start()
    seen = []
    with StagingConsumer(engine.endpoint) as c:
        for step in c.steps():
            seen.append(step.step)
    t.join(timeout=10)
    engine.close(timeout=10)
    assert seen == list(range(12))


# -- overlap report -----------------------------------------------------------------


def test_overlap_report_zero_steps():
    stats = pipeline_overlap_report([], [])
    assert stats == OverlapStats(0.0, 0.0, 0.0, 0)


def test_overlap_report_consumer_faster():
    """Consumer keeps up: producer blocked time stays negligible."""
    prod = [(s, 10.0 + s, 10.0 + s + 0.01) for s in range(4)]
    cons = [(s, 10.0 + s, 10.0 + s + 0.02, 10.0 + s + 0.2) for s in range(4)]
    stats = pipeline_overlap_report(prod, cons)
    assert stats.producer_blocked_s < 0.1
    assert stats.steps == 4


def test_overlap_report_arithmetic_matches_schedule():
    """compute 0.2s/step, analysis 0.1s/step, 4 steps: tts ~ 0.8 + 0.1 tail."""
    spec = WorkloadSpec(nx=16, ny=16, nz=2, n_3d_fields=1, n_2d_fields=0,
                        steps=4, compute_ms_per_step=200, px=1, py=1,
                        nodes=1, ranks_per_node=1, seed=2)
    engine = StagingEngine(LOCAL, world_size=1)
    consumer_log = []

    def consume():
        with StagingConsumer(engine.endpoint) as c:
            for step in c.steps():
                c.get("T")
                time.sleep(0.1)
        consumer_log.extend(c.consumer_log)

    t = threading.Thread(target=consume, daemon=True)
    t.start()
    drive_ranks(spec, engine)
    engine.close(timeout=30)
    t.join(timeout=30)
    stats = pipeline_overlap_report(engine.producer_log, consumer_log)
    assert stats.steps == 4
    assert stats.time_to_solution_s == pytest.approx(4 * 0.2 + 0.1, rel=0.20)
    assert stats.producer_blocked_s < 0.2
