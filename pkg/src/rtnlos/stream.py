"""Photon record codec and the parsing stage.

Record layout (32-bit little-endian word)::

    bit 31      special flag
    bits 30-25  channel, or marker code for special records
    bits 24-10  dtime, in units of the time bin (8 ps)
    bits 9-0    nsync, laser pulse counter modulo 1024

Marker codes: 0 frame start, 1 frame end, 63 nsync overflow (+1024 syncs).
Codes 2-62 are reserved and rejected.
"""
from __future__ import annotations

import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, NamedTuple, Optional, Union

import numpy as np

from .config import SystemConfig, VirtualGrid, calibration_offsets, derive_virtual_grid
from .errors import StreamError

MAGIC = b"NLRT"
FORMAT_VERSION = 1
HEADER = struct.Struct("<4sHQ")
HEADER_SIZE = HEADER.size

FRAME_START = 0
FRAME_END = 1
OVERFLOW = 63
SYNC_WRAP = 1024
DTIME_MAX = (1 << 15) - 1
CHANNEL_MAX = 62


class Photon(NamedTuple):
    channel: int
    dtime: int
    nsync: int


class Marker(NamedTuple):
    code: int


PhotonRecord = Union[Photon, Marker]


class PixelEvent(NamedTuple):
    row: int
    col: int
    pixel_id: int
    wall_time_s: float
    frame_id: int


def encode_record(rec: PhotonRecord) -> int:
    if isinstance(rec, Marker):
        if rec.code not in (FRAME_START, FRAME_END, OVERFLOW):
            raise ValueError(f"reserved marker code {rec.code}")
        return (1 << 31) | (rec.code << 25)
    if not 0 <= rec.channel <= CHANNEL_MAX:
        raise ValueError(f"channel {rec.channel} out of range")
    if not 0 <= rec.dtime <= DTIME_MAX or not 0 <= rec.nsync < SYNC_WRAP:
        raise ValueError("dtime or nsync out of range")
    return (rec.channel << 25) | (rec.dtime << 10) | rec.nsync


def decode_record(word: int, offset: int = 0) -> PhotonRecord:
    word = int(word) & 0xFFFFFFFF
    code = (word >> 25) & 0x3F
    if word >> 31:
        if code not in (FRAME_START, FRAME_END, OVERFLOW):
            raise StreamError(f"reserved marker code {code}", offset)
        return Marker(code)
    return Photon(code, (word >> 10) & 0x7FFF, word & 0x3FF)


def encode_records(channel, dtime, nsync):
    """Vectorised photon-word packing."""
    channel = np.asarray(channel, dtype=np.uint32)
    dtime = np.asarray(dtime, dtype=np.uint32)
    nsync = np.asarray(nsync, dtype=np.uint32)
    return (channel << 25) | (dtime << 10) | nsync


def marker_word(code):
    return np.uint32((1 << 31) | (code << 25))


# ---------------------------------------------------------------------------
# stream files

def write_stream(path, words, config_hash=0):
    words = np.asarray(words, dtype="<u4")
    with open(path, "wb") as fh:
        fh.write(HEADER.pack(MAGIC, FORMAT_VERSION, config_hash))
        fh.write(words.tobytes())


def stream_bytes(words, config_hash=0) -> bytes:
    return HEADER.pack(MAGIC, FORMAT_VERSION, config_hash) + np.asarray(words, "<u4").tobytes()


def parse_header(blob: bytes):
    if len(blob) < HEADER_SIZE:
        raise StreamError("truncated stream header", 0)
    magic, version, config_hash = HEADER.unpack_from(blob)
    if magic != MAGIC:
        raise StreamError(f"bad magic {magic!r}", 0)
    if version != FORMAT_VERSION:
        raise StreamError(f"unsupported stream version {version}", 4)
    return version, config_hash


def read_stream(path):
    """Return (config_hash, words) for a stream file."""
    blob = Path(path).read_bytes()
    _, config_hash = parse_header(blob)
    body = blob[HEADER_SIZE:]
    if len(body) % 4:
        raise StreamError("stream body is not a whole number of records",
                          HEADER_SIZE + len(body) - len(body) % 4)
    return config_hash, np.frombuffer(body, dtype="<u4").astype(np.uint32)


# ---------------------------------------------------------------------------
# per-record operations of the parsing stage

def demux_pixel(rec: Photon, config: SystemConfig):
    """Return (pixel_id, window-corrected time in s), or None when out of window."""
    spads = config.spads
    t = rec.dtime * config.phasor.time_bin_s
    for w, (lo, hi) in enumerate(spads.windows_s):
        if lo <= t < hi:
            q = spads.pixel_id(rec.channel, w)
            if q is None:
                return None
            return q, t - lo
    return None


def grid_index(running_sync: int, config: SystemConfig) -> Optional[int]:
    """Laser point for a sync count since frame start; None after the scan ends."""
    if running_sync < 0:
        raise ValueError("running sync count must be nonnegative")
    point = int(config.point_of_sync(running_sync))
    if point >= config.scan.point_count:
        return None
    return int(point)


def remap_virtual(point: int, pixel_id: int, grid: VirtualGrid, corrected_time: float,
                  config: SystemConfig, frame_id: int = 0, offsets=None) -> Optional[PixelEvent]:
    """Assign one photon to the virtual grid and move its time origin to the wall.

    The remap shifts the laser position only; the time axis is corrected for
    the device-to-wall flight paths and nothing else.
    """
    row, col = config.scan.point_rc(point)
    row, col = int(row), int(col)
    vcol = int(grid.column_map[col, pixel_id])
    if vcol < 0:
        return None
    d_laser, d_spad = offsets if offsets is not None else calibration_offsets(config)
    wall = corrected_time - d_laser[row, col] - d_spad[pixel_id]
    return PixelEvent(row, vcol, pixel_id, wall, frame_id)


# ---------------------------------------------------------------------------
# vectorised stream parser

@dataclass
class FrameEvents:
    """One frame of remapped photons, stored column-wise."""

    frame_id: int
    rows: np.ndarray
    cols: np.ndarray
    pixels: np.ndarray
    wall_time_s: np.ndarray
    dropped: Dict[str, int] = field(default_factory=dict)

    def __len__(self):
        return len(self.rows)

    def flat_index(self, grid_cols):
        return self.rows.astype(np.int64) * grid_cols + self.cols

    def events(self):
        for r, c, q, t in zip(self.rows, self.cols, self.pixels, self.wall_time_s):
            yield PixelEvent(int(r), int(c), int(q), float(t), self.frame_id)

    @classmethod
    def empty(cls, frame_id):
        z = np.zeros(0, dtype=np.int64)
        return cls(frame_id, z, z.copy(), z.copy(), np.zeros(0))

    @classmethod
    def from_events(cls, events: List[PixelEvent], frame_id=None):
        if frame_id is None:
            frame_id = events[0].frame_id if events else 0
        if any(e.frame_id != frame_id for e in events):
            raise ValueError("events span more than one frame")
        arr = np.array([(e.row, e.col, e.pixel_id) for e in events], dtype=np.int64).reshape(-1, 3)
        times = np.array([e.wall_time_s for e in events], dtype=float)
        return cls(frame_id, arr[:, 0].copy(), arr[:, 1].copy(), arr[:, 2].copy(), times)


DROP_KEYS = ("outside_frame", "out_of_window", "unmapped_channel", "post_scan",
             "off_aperture", "negative_time")


class StreamParser:
    """Stateful, single-pass parser turning record chunks into frames.

    Feed word arrays in stream order with :meth:`feed`; completed frames are
    returned as they close. Dropped photons are tallied per reason in
    :attr:`dropped` and per frame in ``FrameEvents.dropped``.
    """

    def __init__(self, config: SystemConfig, grid: Optional[VirtualGrid] = None,
                 distance_table=None, byte_offset=HEADER_SIZE):
        self.config = config
        self.grid = grid or derive_virtual_grid(config.scan, config.spads, config.relay)
        d_laser, d_spad = calibration_offsets(config, distance_table)
        self._d_laser = d_laser
        self._d_spad = d_spad
        spads = config.spads
        self._win_lo = np.array([w[0] for w in spads.windows_s])
        self._win_hi = np.array([w[1] for w in spads.windows_s])
        order = np.argsort(self._win_lo)
        self._win_order = order
        self._win_sorted_lo = self._win_lo[order]
        self._pixel_lut = np.full((64, len(spads.windows_s)), -1, dtype=np.int64)
        for q, (ch, w) in enumerate(spads.channel_map):
            self._pixel_lut[ch, w] = q
        self.offset = byte_offset
        self.in_frame = False
        self.base = 0
        self.last_sync = 0
        self.next_frame_id = 0
        self.frames_closed = 0
        self.overflows = 0
        self.dropped = {k: 0 for k in DROP_KEYS}
        self._parts = []
        self._frame_drops = {k: 0 for k in DROP_KEYS}

    def _drop(self, key, n):
        if n:
            self.dropped[key] += int(n)
            if key != "outside_frame":
                self._frame_drops[key] += int(n)

    def feed(self, words) -> List[FrameEvents]:
        words = np.asarray(words, dtype=np.uint32)
        start_offset = self.offset
        self.offset += 4 * len(words)
        if len(words) == 0:
            return []
        special = (words >> 31).astype(bool)
        code = ((words >> 25) & 0x3F).astype(np.int64)
        bad = special & (code > FRAME_END) & (code < OVERFLOW)
        if bad.any():
            i = int(np.argmax(bad))
            raise StreamError(f"reserved marker code {int(code[i])}", start_offset + 4 * i)
        frame_marks = np.flatnonzero(special & (code <= FRAME_END))
        out = []
        lo = 0
        for m in list(frame_marks) + [len(words)]:
            if m > lo:
                self._segment(words[lo:m], special[lo:m], code[lo:m], start_offset + 4 * lo)
            if m == len(words):
                break
            if code[m] == FRAME_START:
                if self.in_frame:
                    # unterminated frame: close it so nothing is lost silently
                    out.append(self._close())
                self.in_frame = True
                self.base = 0
                self.last_sync = 0
            else:
                if self.in_frame:
                    out.append(self._close())
                self.in_frame = False
            lo = m + 1
        return out

    def finish(self) -> List[FrameEvents]:
        """Flush a frame left open at end of stream."""
        if self.in_frame:
            self.in_frame = False
            return [self._close()]
        return []

    def _segment(self, words, special, code, offset):
        overflow = special & (code == OVERFLOW)
        photon = ~special
        if not self.in_frame:
            self._drop("outside_frame", photon.sum())
            return
        ovf_before = np.cumsum(overflow) - overflow
        self.overflows += int(overflow.sum())
        idx = np.flatnonzero(photon)
        if len(idx):
            sync = self.base + SYNC_WRAP * ovf_before[idx] + (words[idx] & 0x3FF).astype(np.int64)
            prev = np.concatenate(([self.last_sync], sync[:-1]))
            back = sync < prev
            if back.any():
                k = int(np.argmax(back))
                raise StreamError("sync counter went backwards", offset + 4 * int(idx[k]))
            self.last_sync = int(sync[-1])
            self._photons(words[idx], sync)
        self.base += SYNC_WRAP * int(overflow.sum())

    def _photons(self, words, sync):
        cfg = self.config
        channel = ((words >> 25) & 0x3F).astype(np.int64)
        t = ((words >> 10) & 0x7FFF).astype(np.int64) * cfg.phasor.time_bin_s
        pos = np.searchsorted(self._win_sorted_lo, t, side="right") - 1
        ok = pos >= 0
        win = self._win_order[np.clip(pos, 0, None)]
        ok &= t < self._win_hi[win]
        self._drop("out_of_window", (~ok).sum())
        channel, t, win, sync = channel[ok], t[ok], win[ok], sync[ok]
        pixel = self._pixel_lut[channel, win]
        ok = pixel >= 0
        self._drop("unmapped_channel", (~ok).sum())
        pixel, t, win, sync = pixel[ok], t[ok] - self._win_lo[win[ok]], win[ok], sync[ok]

        point = cfg.point_of_sync(sync)
        ok = point < cfg.scan.point_count
        self._drop("post_scan", (~ok).sum())
        point, pixel, t = point[ok], pixel[ok], t[ok]
        row, col = cfg.scan.point_rc(point)
        vcol = self.grid.column_map[col, pixel]
        ok = vcol >= 0
        self._drop("off_aperture", (~ok).sum())
        row, col, vcol, pixel, t = row[ok], col[ok], vcol[ok], pixel[ok], t[ok]
        wall = t - self._d_laser[row, col] - self._d_spad[pixel]
        ok = wall >= 0
        self._drop("negative_time", (~ok).sum())
        self._parts.append((row[ok], vcol[ok], pixel[ok], wall[ok]))

    def _close(self) -> FrameEvents:
        if self._parts:
            rows, cols, pixels, times = (np.concatenate(p) for p in zip(*self._parts))
            frame = FrameEvents(self.next_frame_id, rows, cols, pixels, times)
        else:
            frame = FrameEvents.empty(self.next_frame_id)
        frame.dropped = dict(self._frame_drops)
        self._frame_drops = {k: 0 for k in DROP_KEYS}
        self._parts = []
        self.next_frame_id += 1
        self.frames_closed += 1
        return frame


def parse_stream(words, config, grid=None, distance_table=None) -> List[FrameEvents]:
    """Parse a complete word array (offline, sequential)."""
    parser = StreamParser(config, grid, distance_table)
    frames = parser.feed(words)
    frames.extend(parser.finish())
    return frames


# ---------------------------------------------------------------------------
# encoder

def encode_frame(points, pixels, times_s, config: SystemConfig, rng, drops=None):
    """Pack one frame of detector-time photons into words.

    ``points``/``pixels``/``times_s`` are parallel arrays: raster scan point,
    SPAD pixel and arrival time relative to that pixel's gate (before the
    cable delay). Each photon is placed on a random laser pulse within its
    point's dwell. Returns a uint32 array framed by start/end markers, with
    overflow markers covering the frame's full sync count.
    """
    points = np.asarray(points, dtype=np.int64)
    pixels = np.asarray(pixels, dtype=np.int64)
    times_s = np.asarray(times_s, dtype=float)
    spads = config.spads
    dt = config.phasor.time_bin_s
    cmap = np.asarray(spads.channel_map, dtype=np.int64).reshape(-1, 2)
    win_lo = np.array([w[0] for w in spads.windows_s])
    channel = cmap[pixels, 0]
    window = cmap[pixels, 1]
    dtime = np.floor((times_s + win_lo[window]) / dt + 0.5).astype(np.int64)
    limit = min(DTIME_MAX, int(round(config.sync_period_s / dt)) - 1)
    ok = (dtime >= 0) & (dtime <= limit)
    if drops is not None:
        drops["beyond_sync"] = drops.get("beyond_sync", 0) + int((~ok).sum())
    points, channel, dtime = points[ok], channel[ok], dtime[ok]

    sync = rng.integers(config.first_sync(points), config.first_sync(points + 1))
    order = np.argsort(sync, kind="stable")
    sync, channel, dtime = sync[order], channel[order], dtime[order]

    n_ovf = config.frame_syncs // SYNC_WRAP
    n = len(sync)
    out = np.empty(n + n_ovf + 2, dtype=np.uint32)
    out[0] = marker_word(FRAME_START)
    out[-1] = marker_word(FRAME_END)
    wraps = sync // SYNC_WRAP
    photon_pos = 1 + np.arange(n) + wraps
    m = np.arange(1, n_ovf + 1)
    ovf_pos = m + np.searchsorted(wraps, m, side="left")
    out[photon_pos] = encode_records(channel, dtime, sync % SYNC_WRAP)
    out[ovf_pos] = marker_word(OVERFLOW)
    return out
