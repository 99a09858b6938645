import socket
import threading
import time

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from rtnlos.config import PipelineTuning
from rtnlos.errors import StreamError
from rtnlos.experiments import FrameReconstructor
from rtnlos.pipeline import (STAGES, CallbackSink, FileSource, MemorySink, PGMSink, Pipeline,
                             SocketSource, WordsSource, reconstruct_offline, run_pipeline)
from rtnlos.simulator import PointTarget, Scene, SurfacePatch, simulate_stream
from rtnlos.stream import FRAME_END, HEADER_SIZE, encode_frame, stream_bytes, write_stream

from conftest import small_config

SCENE = Scene(patches=(SurfacePatch((0.0, 0.0, 1.3), 0.3, 0.3, density_per_m2=400.0,
                                    name="patch.a"),),
              targets=(PointTarget((0.03, 0.02, 1.5), 0.002, name="target.b"),))


def config(**tuning):
    return small_config(16, z=(1.0, 3.0, 0.25),
                        pipeline=PipelineTuning(**{"queue_capacity": 2, **tuning}))


@pytest.fixture(scope="module")
def stream():
    cfg = config()
    words, _ = simulate_stream(SCENE, cfg, 8, seed=3)
    return cfg, words


@pytest.fixture(scope="module")
def recon(stream):
    return FrameReconstructor(stream[0])


def frame_chunks(words):
    ends = np.flatnonzero(((words >> 31) == 1) & (((words >> 25) & 0x3F) == FRAME_END)) + 1
    return np.split(words, ends[:-1])


def test_empty_stream_gives_one_zero_frame(rng):
    cfg = config()
    words = encode_frame([], [], [], cfg, rng)
    sink = MemorySink()
    report = run_pipeline(WordsSource([words]), cfg, sink)
    assert report.frames_out == 1
    assert not sink.frames[0].image.any()


def test_no_input_at_all():
    report = run_pipeline(WordsSource([]), config(), MemorySink())
    assert report.frames_out == 0 and report.achieved_fps == 0.0


def test_frames_arrive_in_order_without_loss(stream, recon):
    cfg, words = stream
    sink = MemorySink()
    report = run_pipeline(WordsSource(frame_chunks(words)), cfg, sink, reconstructor=recon)
    assert [f.frame_id for f in sink.frames] == list(range(8))
    assert report.frames_out == 8 and not any(report.dropped_frames.values())
    assert all(f.latency_s >= 0 for f in sink.frames)
    assert set(report.stage_mean_s) == set(STAGES)


def test_output_equals_offline_reconstruction_bitwise(stream, recon):
    cfg, words = stream
    sink = MemorySink()
    # arbitrary chunking must not matter
    run_pipeline(WordsSource(np.array_split(words, 13)), cfg, sink, reconstructor=recon,
                 keep_volumes=True)
    offline = list(reconstruct_offline(words, cfg, reconstructor=recon))
    assert len(offline) == len(sink.frames) == 8
    for out, (fid, vol, image, depth) in zip(sink.frames, offline):
        assert out.frame_id == fid
        np.testing.assert_array_equal(out.image, image)
        np.testing.assert_array_equal(out.depth_map, depth)
        np.testing.assert_array_equal(out.volume.data, vol.data)


def test_drop_oldest_keeps_order_with_gaps(stream, recon):
    _, words = stream
    cfg = config(queue_capacity=1, drop_policy="drop-oldest")
    sink = MemorySink()
    report = run_pipeline(WordsSource(frame_chunks(words) * 3), cfg, sink, reconstructor=recon,
                          stage_delays={"reconstruction": 0.05})
    ids = [f.frame_id for f in sink.frames]
    assert ids == sorted(set(ids)) and len(ids) < 24
    assert ids[-1] == 23  # the newest frame always survives
    assert sum(report.dropped_frames.values()) == 24 - len(ids)


def test_stalled_sink_fills_queue_to_capacity(stream, recon):
    cfg, words = stream
    report = run_pipeline(WordsSource(frame_chunks(words)), cfg, MemorySink(),
                          reconstructor=recon, stage_delays={"sink": 0.1})
    assert report.queue_high_water["recon->sink"] == cfg.pipeline.queue_capacity
    assert max(report.queue_high_water.values()) <= cfg.pipeline.queue_capacity
    assert report.frames_out == 8


@settings(max_examples=6, deadline=None)
@given(st.integers(0, 2 ** 32 - 1), st.sampled_from(["block", "drop-oldest"]))
def test_random_stage_delays_shut_down_cleanly(seed, policy):
    cfg = config(queue_capacity=1, drop_policy=policy)
    words, _ = simulate_stream(Scene(), cfg, 6, seed=1)
    delay_rng = np.random.default_rng(seed)
    lock = threading.Lock()

    def jitter():
        with lock:
            return float(delay_rng.uniform(0, 0.02))

    sink = MemorySink()
    t0 = time.perf_counter()
    run_pipeline(WordsSource(frame_chunks(words)), cfg, sink,
                 stage_delays={s: jitter for s in STAGES})
    ids = [f.frame_id for f in sink.frames]
    assert ids == sorted(set(ids))
    if policy == "block":
        assert ids == list(range(6))
    assert time.perf_counter() - t0 < 30


def test_malformed_stream_aborts_with_offset(stream, recon):
    cfg, words = stream
    bad = words.copy()
    bad[5] = (1 << 31) | (17 << 25)
    pipe = Pipeline(WordsSource([bad]), cfg, MemorySink(), reconstructor=recon)
    with pytest.raises(StreamError) as info:
        pipe.run()
    assert info.value.offset == HEADER_SIZE + 5 * 4
    assert not any(t.is_alive() for t in pipe._threads)


def test_sink_failure_propagates(stream, recon):
    cfg, words = stream

    def boom(frame):
        raise RuntimeError("disk full")

    with pytest.raises(RuntimeError, match="disk full"):
        run_pipeline(WordsSource(frame_chunks(words)), cfg, CallbackSink(boom),
                     reconstructor=recon)


def test_idle_metrics_are_zero(stream, recon):
    cfg, _ = stream
    pipe = Pipeline(WordsSource([]), cfg, reconstructor=recon)
    snap = pipe.snapshot_metrics()
    assert set(snap["queue_depths"].values()) == {0}
    assert set(snap["frames"].values()) == {0} and snap["last_latency_s"] is None


def test_paced_file_replay(tmp_path, stream, recon):
    cfg, words = stream
    path = tmp_path / "s.nlrt"
    write_stream(path, words, cfg.hash64())
    src = FileSource(path, frame_rate_hz=20.0)
    t0 = time.perf_counter()
    report = run_pipeline(src, cfg, PGMSink(tmp_path / "out"), reconstructor=recon)
    assert time.perf_counter() - t0 >= 8 / 20.0 - 0.01
    assert report.frames_out == 8
    assert len(list((tmp_path / "out").glob("frame_*.pgm"))) == 8
    assert src.config_hash == cfg.hash64()


def test_socket_source(stream, recon):
    cfg, words = stream
    payload = stream_bytes(words, cfg.hash64())
    server = socket.create_server(("127.0.0.1", 0))
    port = server.getsockname()[1]

    def serve():
        conn, _ = server.accept()
        with conn:
            for i in range(0, len(payload), 4099):  # splits records across sends
                conn.sendall(payload[i:i + 4099])
        server.close()

    threading.Thread(target=serve, daemon=True).start()
    sink = MemorySink()
    run_pipeline(SocketSource(("127.0.0.1", port)), cfg, sink, reconstructor=recon)
    offline = list(reconstruct_offline(words, cfg, reconstructor=recon))
    assert [f.frame_id for f in sink.frames] == list(range(8))
    np.testing.assert_array_equal(sink.frames[-1].image, offline[-1][2])
