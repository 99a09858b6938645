"""Frequency-domain histogram (FDH) binning.

Photons are accumulated straight into per-frequency phasor sums, skipping
the time histogram. The phase of each photon is looked up in a table of
``table_size`` unit phasors, indexed by ``floor(frac(f * t) * table_size)``.

Table entries are fixed point (integer multiples of 2**-30), so the sums are
exact integer arithmetic in float64 while a cell holds fewer than 2**23
events: binning is then exactly linear and order independent.
"""
from __future__ import annotations

import struct
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .config import FrequencySet
from .stream import FrameEvents

DEFAULT_TABLE_SIZE = 65536
FIXED_POINT = float(2 ** 30)

_tables = {}


def phase_table(table_size):
    """(cos, sin) lookup tables in fixed-point units."""
    tables = _tables.get(table_size)
    if tables is None:
        angle = 2 * np.pi * np.arange(table_size) / table_size
        tables = (np.rint(np.cos(angle) * FIXED_POINT), np.rint(np.sin(angle) * FIXED_POINT))
        for tab in tables:
            tab.flags.writeable = False
        _tables[table_size] = tables
    return tables


@dataclass
class FrequencyDomainHistogram:
    data: np.ndarray  # complex, (K, rows, cols), frequency-major
    frame_id: int
    event_count: int
    dropped: int = 0

    @property
    def shape(self):
        return self.data.shape

    @classmethod
    def zeros(cls, k, rows, cols, frame_id=0):
        return cls(np.zeros((k, rows, cols), dtype=complex), frame_id, 0)


def bin_frame(events: FrameEvents, freqs: FrequencySet, grid_shape,
              table_size=DEFAULT_TABLE_SIZE, workers=1) -> FrequencyDomainHistogram:
    """Accumulate one frame of events into an FDH.

    Accumulation inside one frequency is serial over events in their given
    order; ``workers > 1`` only splits the frequency loop, so results are
    bit-identical for any worker count.
    """
    if table_size < 1024:
        raise ValueError("table_size must be at least 1024")
    rows, cols = grid_shape
    r = np.asarray(events.rows, dtype=np.int64)
    c = np.asarray(events.cols, dtype=np.int64)
    inside = (r >= 0) & (r < rows) & (c >= 0) & (c < cols)
    dropped = int((~inside).sum())
    idx = (r * cols + c)[inside]
    t = np.asarray(events.wall_time_s, dtype=float)[inside]
    cos_tab, sin_tab = phase_table(table_size)
    pow2 = table_size & (table_size - 1) == 0
    ncell = rows * cols
    # pre-multiplied frequencies: phase turns scaled by the table size
    scaled = np.asarray(freqs.frequencies_hz, dtype=float) * table_size
    out = np.empty((len(scaled), ncell), dtype=complex)

    def one(k):
        turns = np.floor(scaled[k] * t).astype(np.int64)
        turns = turns & (table_size - 1) if pow2 else turns % table_size
        out[k].real = np.bincount(idx, weights=cos_tab[turns], minlength=ncell)
        out[k].imag = np.bincount(idx, weights=sin_tab[turns], minlength=ncell)

    if workers > 1 and len(scaled) > 1:
        with ThreadPoolExecutor(workers) as pool:
            list(pool.map(one, range(len(scaled))))
    else:
        for k in range(len(scaled)):
            one(k)
    out /= FIXED_POINT
    return FrequencyDomainHistogram(out.reshape(len(scaled), rows, cols), events.frame_id,
                                    int(idx.size), dropped)


def fdh_oracle(histogram, freqs: FrequencySet, time_bin_s) -> np.ndarray:
    """Exact FDH of a time histogram shaped (rows, cols, T), bin b at time b*dt."""
    histogram = np.asarray(histogram, dtype=float)
    t = np.arange(histogram.shape[-1]) * time_bin_s
    basis = np.exp(2j * np.pi * np.outer(t, freqs.frequencies_hz))  # (T, K)
    spec = histogram.reshape(-1, histogram.shape[-1]) @ basis
    return np.moveaxis(spec, -1, 0).reshape((freqs.count,) + histogram.shape[:-1])


def apply_cell_weights(fdh: FrequencyDomainHistogram, weights) -> FrequencyDomainHistogram:
    """Scale each grid cell, e.g. to average pixels pooled into one virtual column."""
    return FrequencyDomainHistogram(fdh.data * np.asarray(weights)[None], fdh.frame_id,
                                    fdh.event_count, fdh.dropped)


_FDH_HEADER = struct.Struct("<4sIIIqQ")


def save_fdh(path, fdh: FrequencyDomainHistogram, freqs: FrequencySet):
    k, rows, cols = fdh.data.shape
    with open(path, "wb") as fh:
        fh.write(_FDH_HEADER.pack(b"NFDH", k, rows, cols, fdh.frame_id, fdh.event_count))
        fh.write(np.asarray(freqs.frequencies_hz, "<f8").tobytes())
        fh.write(np.asarray(freqs.weights, "<c16").tobytes())
        fh.write(np.ascontiguousarray(fdh.data, "<c16").tobytes())


def load_fdh(path):
    """Return (FrequencyDomainHistogram, frequencies_hz, weights)."""
    blob = Path(path).read_bytes()
    magic, k, rows, cols, frame_id, count = _FDH_HEADER.unpack_from(blob)
    if magic != b"NFDH":
        raise ValueError(f"{path} is not an FDH dump")
    pos = _FDH_HEADER.size
    f = np.frombuffer(blob, "<f8", k, pos).copy()
    pos += 8 * k
    w = np.frombuffer(blob, "<c16", k, pos).copy()
    pos += 16 * k
    data = np.frombuffer(blob, "<c16", k * rows * cols, pos).reshape(k, rows, cols).copy()
    return FrequencyDomainHistogram(data, frame_id, count), f, w
