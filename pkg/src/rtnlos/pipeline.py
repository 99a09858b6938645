"""Five-stage concurrent reconstruction pipeline.

Acquisition -> Parsing -> Binning -> Reconstruction -> Sink, one thread
each, joined by bounded FIFO queues. Only immutable messages cross the
queues; every piece of mutable state (parser, frame ring) belongs to a
single stage. A sentinel travelling behind the last frame drains the
pipeline; any stage failure sets an abort flag that unblocks every other
stage.
"""
from __future__ import annotations

import logging
import queue
import socket
import threading
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Dict, Iterator, List, Optional

import numpy as np

from .averaging import FrameRing, GainCurve, depth_average, ring_capacity
from .config import SystemConfig
from .errors import StreamError
from .experiments import FrameReconstructor
from .rsd import form_image, write_pgm16
from .simulator import FrameSimulator, Scene
from .stream import (FRAME_END, HEADER_SIZE, StreamParser, encode_frame, parse_header,
                     read_stream)

log = logging.getLogger(__name__)

STAGES = ("acquisition", "parsing", "binning", "reconstruction", "sink")
_POLL_S = 0.05


class _Sentinel:
    pass


END = _Sentinel()


@dataclass(frozen=True)
class StageMessage:
    """Payload handed from one stage to the next."""

    kind: str  # "records" | "events" | "fdh" | "image"
    payload: object
    frame_id: int
    capture_time: float
    stamps: tuple = ()  # ((stage, finish time), ...)

    def stamped(self, stage, kind=None, payload=None, frame_id=None):
        return StageMessage(kind or self.kind, self.payload if payload is None else payload,
                            self.frame_id if frame_id is None else frame_id,
                            self.capture_time, self.stamps + ((stage, time.perf_counter()),))


@dataclass
class OutputFrame:
    frame_id: int
    image: np.ndarray
    depth_map: np.ndarray
    capture_time: float
    latency_s: float
    volume: object = None


# ---------------------------------------------------------------------------
# sources

class FileSource:
    """Replays a recorded stream file frame by frame.

    Each chunk ends with a frame-end marker. Unless ``max_speed`` is set,
    chunk i is released at i+1 frame periods after the start, i.e. when a
    live capture would have finished that frame.
    """

    def __init__(self, path, frame_rate_hz, max_speed=False):
        self.config_hash, self.words = read_stream(path)
        self.frame_rate_hz = frame_rate_hz
        self.max_speed = max_speed

    def chunks(self, stop: threading.Event) -> Iterator[np.ndarray]:
        words = self.words
        special = (words >> 31).astype(bool)
        code = (words >> 25) & 0x3F
        ends = np.flatnonzero(special & (code == FRAME_END)) + 1
        bounds = [0] + list(ends) + ([len(words)] if not len(ends) or ends[-1] != len(words)
                                     else [])
        t0 = time.perf_counter()
        period = 1.0 / self.frame_rate_hz
        for i, (lo, hi) in enumerate(zip(bounds, bounds[1:])):
            if not self.max_speed:
                delay = t0 + (i + 1) * period - time.perf_counter()
                if delay > 0 and stop.wait(delay):
                    return
            if stop.is_set():
                return
            yield words[lo:hi]


class SimulatorSource:
    """Simulates and encodes frames live, throttled to the frame rate."""

    def __init__(self, scene: Scene, config: SystemConfig, n_frames, seed, max_speed=False):
        self.sim = FrameSimulator(scene, config)
        self.config = config
        self.n_frames = n_frames
        self.rng = np.random.default_rng(seed)
        self.max_speed = max_speed

    def chunks(self, stop):
        period = 1.0 / self.config.frame_rate_hz
        t0 = time.perf_counter()
        for i in range(self.n_frames):
            ph = self.sim.frame(self.rng, i * period)
            words = encode_frame(ph.points, ph.pixels, ph.times_s, self.config, self.rng)
            if not self.max_speed:
                delay = t0 + (i + 1) * period - time.perf_counter()
                if delay > 0 and stop.wait(delay):
                    return
            if stop.is_set():
                return
            yield words


class SocketSource:
    """Reads the stream file layout from a connected byte stream."""

    def __init__(self, address, timeout=10.0, chunk_bytes=1 << 16):
        self.address = address
        self.timeout = timeout
        self.chunk_bytes = chunk_bytes
        self.config_hash = None

    def chunks(self, stop):
        with socket.create_connection(self.address, timeout=self.timeout) as sock:
            buf = b""
            while len(buf) < HEADER_SIZE:
                part = sock.recv(HEADER_SIZE - len(buf))
                if not part:
                    raise StreamError("connection closed inside the stream header", len(buf))
                buf += part
            self.config_hash = parse_header(buf)
            rest = b""
            while not stop.is_set():
                part = sock.recv(self.chunk_bytes)
                if not part:
                    break
                rest += part
                usable = len(rest) - len(rest) % 4
                if usable:
                    yield np.frombuffer(rest[:usable], "<u4").copy()
                    rest = rest[usable:]
            if rest:
                raise StreamError("stream ends inside a record", None)


class WordsSource:
    """In-memory word chunks (tests, offline replays)."""

    def __init__(self, chunks):
        self._chunks = list(chunks)

    def chunks(self, stop):
        for c in self._chunks:
            if stop.is_set():
                return
            yield np.asarray(c, dtype=np.uint32)


# ---------------------------------------------------------------------------
# sinks

class NullSink:
    def write(self, frame: OutputFrame):
        pass

    def close(self):
        pass


class MemorySink:
    def __init__(self):
        self.frames: List[OutputFrame] = []

    def write(self, frame):
        self.frames.append(frame)

    def close(self):
        pass


class PGMSink:
    """Writes ``frame_NNNNN.pgm`` (intensity) and ``depth_NNNNN.pgm`` per frame."""

    def __init__(self, directory, scale=None):
        self.directory = Path(directory)
        self.directory.mkdir(parents=True, exist_ok=True)
        self.scale = scale

    def write(self, frame):
        write_pgm16(self.directory / f"frame_{frame.frame_id:05d}.pgm", frame.image, self.scale)
        write_pgm16(self.directory / f"depth_{frame.frame_id:05d}.pgm", frame.depth_map, 1.0)

    def close(self):
        pass


class CallbackSink:
    def __init__(self, fn: Callable[[OutputFrame], None]):
        self.fn = fn

    def write(self, frame):
        self.fn(frame)

    def close(self):
        pass


# ---------------------------------------------------------------------------
# frame processing shared by the pipeline and offline reconstruction

class ImageFormer:
    """Complex volume -> (optionally depth-averaged) volume -> image."""

    def __init__(self, config: SystemConfig, averaging=None, gain: Optional[GainCurve] = None):
        self.config = config
        self.averaging = config.pipeline.averaging if averaging is None else averaging
        self.scale = config.pipeline.depth_scale_per_m
        self.gain = gain
        self.gain_values = None if gain is None else gain.at(config.volume.depths)
        self.ring = FrameRing(ring_capacity(config.volume.z_max_m, self.scale))

    def __call__(self, vol):
        if self.averaging:
            self.ring.push(vol)
            vol = depth_average(self.ring, self.scale)
        image, depth_map = form_image(vol, self.gain_values)
        return vol, image, depth_map


def load_gain(config: SystemConfig) -> Optional[GainCurve]:
    path = config.pipeline.gain_file
    return GainCurve.load(path) if path else None


# ---------------------------------------------------------------------------
# metrics

class Metrics:
    """Counters updated by the stages; :meth:`snapshot` copies them under a
    short lock so readers never stall the data path."""

    def __init__(self, queues: Dict[str, queue.Queue]):
        self._lock = threading.Lock()
        self._queues = queues
        self.frames = {s: 0 for s in STAGES}
        self.busy = {s: [] for s in STAGES}
        self.high_water = {name: 0 for name in queues}
        self.dropped_frames = {name: 0 for name in queues}
        self.photons_dropped: Dict[str, int] = {}
        self.latencies: List[float] = []
        self.sink_times: List[float] = []
        self.capture_times: List[float] = []
        self.frame_ids: List[int] = []
        self.snapshots: List[dict] = []

    def stage_done(self, stage, seconds):
        with self._lock:
            self.frames[stage] += 1
            self.busy[stage].append(seconds)

    def queued(self, name, depth):
        with self._lock:
            if depth > self.high_water[name]:
                self.high_water[name] = depth

    def dropped(self, name):
        with self._lock:
            self.dropped_frames[name] += 1

    def photon_drops(self, drops):
        with self._lock:
            for k, v in drops.items():
                self.photons_dropped[k] = self.photons_dropped.get(k, 0) + int(v)

    def delivered(self, frame_id, capture, now):
        with self._lock:
            self.frame_ids.append(frame_id)
            self.capture_times.append(capture)
            self.sink_times.append(now)
            self.latencies.append(now - capture)
        self.snapshots.append(self.snapshot())

    def snapshot(self):
        depths = {name: q.qsize() for name, q in self._queues.items()}
        with self._lock:
            return {"time": time.perf_counter(), "queue_depths": depths,
                    "frames": dict(self.frames), "high_water": dict(self.high_water),
                    "last_latency_s": self.latencies[-1] if self.latencies else None}


@dataclass
class RunReport:
    frames_out: int
    frame_ids: List[int]
    achieved_fps: float
    latency_mean_s: float
    latency_max_s: float
    stage_mean_s: Dict[str, float]
    stage_max_s: Dict[str, float]
    queue_high_water: Dict[str, int]
    dropped_frames: Dict[str, int]
    photons_dropped: Dict[str, int]
    snapshots: List[dict] = field(repr=False, default_factory=list)
    wall_time_s: float = 0.0

    def steady_queue_max(self, warmup_frames=3):
        """Largest queue depth seen at sink deliveries after ``warmup_frames``."""
        snaps = self.snapshots[warmup_frames:]
        return max((max(s["queue_depths"].values()) for s in snaps), default=0)

    def lines(self):
        out = [f"frames_out {self.frames_out}", f"achieved_fps {self.achieved_fps:.3f}",
               f"latency_mean_s {self.latency_mean_s:.4f}",
               f"latency_max_s {self.latency_max_s:.4f}",
               f"wall_time_s {self.wall_time_s:.3f}"]
        for s in STAGES:
            out.append(f"stage {s} mean_s {self.stage_mean_s.get(s, 0):.4f} "
                       f"max_s {self.stage_max_s.get(s, 0):.4f}")
        for name, hw in self.queue_high_water.items():
            out.append(f"queue {name} high_water {hw} dropped_frames "
                       f"{self.dropped_frames[name]}")
        for k, v in sorted(self.photons_dropped.items()):
            out.append(f"photons_dropped {k} {v}")
        return out


# ---------------------------------------------------------------------------
# the pipeline

class Pipeline:
    def __init__(self, source, config: SystemConfig, sink=None, gain=None,
                 reconstructor: Optional[FrameReconstructor] = None, keep_volumes=False,
                 stage_delays: Optional[Dict[str, float]] = None):
        self.source = source
        self.config = config
        self.sink = sink or NullSink()
        self.gain = gain if gain is not None else load_gain(config)
        self.recon = reconstructor or FrameReconstructor(config)
        self.keep_volumes = keep_volumes
        self.stage_delays = stage_delays or {}
        cap = config.pipeline.queue_capacity
        self.queues = {name: queue.Queue(maxsize=cap) for name in
                       ("acq->parse", "parse->bin", "bin->recon", "recon->sink")}
        self.metrics = Metrics(self.queues)
        self.stop = threading.Event()
        self.errors: List[BaseException] = []
        self._threads: List[threading.Thread] = []

    # queue helpers -------------------------------------------------------
    def _put(self, name, item):
        q = self.queues[name]
        # raw record chunks are never dropped: losing one would cut a frame
        # marker out of the stream and merge or renumber frames
        drop_oldest = (self.config.pipeline.drop_policy == "drop-oldest" and item is not END
                       and name != "acq->parse")
        while not self.stop.is_set():
            try:
                q.put(item, timeout=_POLL_S)
                self.metrics.queued(name, q.qsize())
                return True
            except queue.Full:
                if drop_oldest:
                    try:
                        old = q.get_nowait()
                    except queue.Empty:
                        continue
                    if old is END:  # never lose the drain signal
                        q.put(old)
                        continue
                    self.metrics.dropped(name)
        return False

    def _get(self, name):
        q = self.queues[name]
        while not self.stop.is_set():
            try:
                return q.get(timeout=_POLL_S)
            except queue.Empty:
                continue
        return END

    def _delay(self, stage):
        d = self.stage_delays.get(stage)
        if d:
            time.sleep(d() if callable(d) else d)

    # stages --------------------------------------------------------------
    def _acquisition(self):
        for i, words in enumerate(self.source.chunks(self.stop)):
            t = time.perf_counter()
            self._delay("acquisition")
            msg = StageMessage("records", words, i, t, (("acquisition", time.perf_counter()),))
            self.metrics.stage_done("acquisition", time.perf_counter() - t)
            if not self._put("acq->parse", msg):
                return
        self._put("acq->parse", END)

    def _parsing(self):
        parser = StreamParser(self.config, self.recon.grid)
        last_capture = time.perf_counter()
        while True:
            msg = self._get("acq->parse")
            if msg is END:
                break
            t = time.perf_counter()
            last_capture = msg.capture_time
            self._delay("parsing")
            frames = parser.feed(msg.payload)
            for fe in frames:
                self.metrics.photon_drops(fe.dropped)
                out = msg.stamped("parsing", "events", fe, fe.frame_id)
                if not self._put("parse->bin", out):
                    return
            self.metrics.stage_done("parsing", time.perf_counter() - t)
        if self.stop.is_set():
            return
        for fe in parser.finish():
            self.metrics.photon_drops(fe.dropped)
            msg = StageMessage("events", fe, fe.frame_id, last_capture)
            if not self._put("parse->bin", msg):
                return
        self.metrics.photon_drops({"outside_frame": parser.dropped["outside_frame"]})
        self._put("parse->bin", END)

    def _binning(self):
        while True:
            msg = self._get("parse->bin")
            if msg is END:
                break
            t = time.perf_counter()
            self._delay("binning")
            fdh = self.recon.fdh(msg.payload)
            self.metrics.stage_done("binning", time.perf_counter() - t)
            if not self._put("bin->recon", msg.stamped("binning", "fdh", fdh)):
                return
        self._put("bin->recon", END)

    def _reconstruction(self):
        former = ImageFormer(self.config, gain=self.gain)
        while True:
            msg = self._get("bin->recon")
            if msg is END:
                break
            t = time.perf_counter()
            self._delay("reconstruction")
            vol, image, depth_map = former(self.recon.volume(msg.payload))
            payload = (image, depth_map, vol if self.keep_volumes else None)
            self.metrics.stage_done("reconstruction", time.perf_counter() - t)
            if not self._put("recon->sink", msg.stamped("reconstruction", "image", payload)):
                return
        self._put("recon->sink", END)

    def _sink(self):
        while True:
            msg = self._get("recon->sink")
            if msg is END:
                break
            t = time.perf_counter()
            self._delay("sink")
            image, depth_map, vol = msg.payload
            now = time.perf_counter()
            frame = OutputFrame(msg.frame_id, image, depth_map, msg.capture_time,
                                now - msg.capture_time, vol)
            self.sink.write(frame)
            done = time.perf_counter()
            self.metrics.stage_done("sink", done - t)
            self.metrics.delivered(msg.frame_id, msg.capture_time, done)

    def _guard(self, fn):
        def run():
            try:
                fn()
            except BaseException as exc:  # reported by run()
                log.error("%s stage failed: %s", fn.__name__.strip("_"), exc)
                self.errors.append(exc)
                self.stop.set()
        return run

    def run(self) -> RunReport:
        t0 = time.perf_counter()
        fns = (self._acquisition, self._parsing, self._binning, self._reconstruction, self._sink)
        self._threads = [threading.Thread(target=self._guard(fn), name=f"stage-{s}", daemon=True)
                         for s, fn in zip(STAGES, fns)]
        for th in self._threads:
            th.start()
        for th in self._threads:
            th.join()
        try:
            self.sink.close()
        finally:
            if self.errors:
                raise self.errors[0]
        return self._report(time.perf_counter() - t0)

    def snapshot_metrics(self):
        return self.metrics.snapshot()

    def _report(self, wall):
        m = self.metrics
        n = len(m.frame_ids)
        if n >= 2 and m.sink_times[-1] > m.sink_times[0]:
            fps = (n - 1) / (m.sink_times[-1] - m.sink_times[0])
        else:
            fps = 0.0
        lat = np.asarray(m.latencies) if m.latencies else np.zeros(1)
        return RunReport(
            frames_out=n, frame_ids=list(m.frame_ids), achieved_fps=fps,
            latency_mean_s=float(lat.mean()), latency_max_s=float(lat.max()),
            stage_mean_s={s: float(np.mean(v)) if v else 0.0 for s, v in m.busy.items()},
            stage_max_s={s: float(np.max(v)) if v else 0.0 for s, v in m.busy.items()},
            queue_high_water=dict(m.high_water), dropped_frames=dict(m.dropped_frames),
            photons_dropped=dict(m.photons_dropped), snapshots=list(m.snapshots),
            wall_time_s=wall)


def run_pipeline(source, config: SystemConfig, sink=None, **kwargs) -> RunReport:
    return Pipeline(source, config, sink, **kwargs).run()


def reconstruct_offline(words, config: SystemConfig, averaging=None, gain=None,
                        reconstructor: Optional[FrameReconstructor] = None):
    """Sequential reference: parse, bin, reconstruct, average and image every frame.

    Yields (frame_id, volume, image, depth_map).
    """
    recon = reconstructor or FrameReconstructor(config)
    parser = StreamParser(config, recon.grid)
    former = ImageFormer(config, averaging, gain)
    frames = parser.feed(words) + parser.finish()
    for fe in frames:
        vol, image, depth_map = former(recon(fe))
        yield fe.frame_id, vol, image, depth_map
