"""Depth-dependent coherent frame averaging, intensity gain and evaluation.

Far planes collect fewer photons, so their reconstructions are averaged over
more consecutive frames: plane z uses the newest ``ceil(z * scale)`` frames
(z in metres). Averaging is coherent, i.e. over complex values.
"""
from __future__ import annotations

import csv
import logging
import math
from collections import deque
from dataclasses import dataclass
from pathlib import Path
from typing import Dict, List, Sequence

import numpy as np

from .errors import CalibrationError, ContractError
from .rsd import ComplexVolume

log = logging.getLogger(__name__)

# depths computed as z_min + k * spacing carry rounding noise; 3.0000000000000004
# must still count as 3 m
_DEPTH_EPS = 1e-9


def frames_for_depth(z_m, scale_per_m=1.0):
    """Number of frames averaged at depth ``z_m``: ceil(z * scale), at least 1."""
    z = np.asarray(z_m, dtype=float)
    n = np.maximum(1, np.ceil(z * scale_per_m - _DEPTH_EPS)).astype(int)
    return int(n) if n.ndim == 0 else n


def ring_capacity(z_max_m, scale_per_m=1.0):
    return frames_for_depth(z_max_m, scale_per_m)


class FrameRing:
    """The last ``capacity`` reconstructed volumes, newest first."""

    def __init__(self, capacity):
        if capacity < 1:
            raise ValueError("ring capacity must be at least 1")
        self.capacity = int(capacity)
        self._frames = deque(maxlen=self.capacity)

    def push(self, vol: ComplexVolume):
        if self._frames and self._frames[0].data.shape != vol.data.shape:
            raise ContractError("volume geometry differs from the frames already held")
        self._frames.appendleft(vol)

    def __len__(self):
        return len(self._frames)

    def __getitem__(self, age):
        """``ring[0]`` is the newest volume, ``ring[1]`` the one before."""
        return self._frames[age]

    @property
    def newest(self):
        return self._frames[0]

    def clear(self):
        self._frames.clear()


def depth_average(ring: FrameRing, scale_per_m=1.0) -> ComplexVolume:
    """Average each depth plane over its ``frames_for_depth`` newest frames.

    Until the ring fills, the count is clamped to the frames available.
    """
    if len(ring) == 0:
        raise ContractError("cannot average an empty frame ring")
    newest = ring.newest
    counts = np.minimum(frames_for_depth(newest.depths_m, scale_per_m), len(ring))
    counts = np.atleast_1d(counts)
    out = newest.data.copy()
    for d, n in enumerate(counts):
        if n > 1:
            acc = newest.data[d].copy()
            for age in range(1, n):
                acc += ring[age].data[d]
            out[d] = acc / n
    return newest.like(out)


# ---------------------------------------------------------------------------
# depth-dependent intensity gain

@dataclass(frozen=True)
class GainCurve:
    """Intensity multiplier per depth, interpolated log-linearly between
    calibration depths and held constant beyond them."""

    depths_m: np.ndarray
    gains: np.ndarray

    def __post_init__(self):
        g = np.asarray(self.gains, float)
        if g.ndim != 1 or len(g) != len(self.depths_m) or len(g) == 0:
            raise CalibrationError("gain table needs matching, nonempty depth and gain columns")
        if not np.all(np.isfinite(g)) or np.any(g <= 0):
            raise CalibrationError("gains must be finite and positive")
        if np.any(np.diff(self.depths_m) <= 0):
            raise CalibrationError("gain table depths must increase")

    @classmethod
    def flat(cls):
        return cls(np.array([1.0]), np.array([1.0]))

    def at(self, depths_m):
        z = np.asarray(depths_m, float)
        return np.exp(np.interp(z, self.depths_m, np.log(self.gains)))

    def save(self, path):
        lines = ["# depth_m gain"]
        lines += [f"{z:.6f} {g:.9g}" for z, g in zip(self.depths_m, self.gains)]
        Path(path).write_text("\n".join(lines) + "\n")

    @classmethod
    def load(cls, path):
        rows = []
        for line in Path(path).read_text().splitlines():
            line = line.split("#", 1)[0].strip()
            if line:
                parts = line.split()
                if len(parts) != 2:
                    raise CalibrationError(f"bad gain table line {line!r}")
                rows.append((float(parts[0]), float(parts[1])))
        if not rows:
            raise CalibrationError(f"{path} holds no gain entries")
        rows.sort()
        z, g = zip(*rows)
        return cls(np.array(z), np.array(g))


def estimate_gain(depths_m, mean_intensity, reference_depth_m=None) -> GainCurve:
    """Gain g(z) = 1 / mean intensity, scaled to 1 at the reference depth
    (default: the nearest calibration depth)."""
    z = np.asarray(depths_m, float)
    m = np.asarray(mean_intensity, float)
    if len(z) < 2:
        raise CalibrationError("gain calibration needs at least two depths")
    if np.any(~np.isfinite(m)) or np.any(m <= 0):
        bad = z[~(np.isfinite(m) & (m > 0))]
        raise CalibrationError(f"zero mean intensity at calibration depths {bad.tolist()}")
    order = np.argsort(z)
    z, m = z[order], m[order]
    g = 1.0 / m
    curve = GainCurve(z, g)
    ref = z[0] if reference_depth_m is None else reference_depth_m
    return GainCurve(z, g / curve.at(ref))


def peak_intensity(vol: ComplexVolume, depth_m, region=None):
    """Largest |U|^2 in the plane nearest ``depth_m`` (optionally in a region)."""
    d = int(np.argmin(np.abs(vol.depths_m - depth_m)))
    plane = np.abs(vol.data[d]) ** 2
    if region is not None:
        r0, r1, c0, c1 = region
        plane = plane[r0:r1, c0:c1]
    return float(plane.max())


# ---------------------------------------------------------------------------
# SNR

@dataclass
class SNRRow:
    depth_m: float
    mean: float
    std: float
    snr: float
    normalized: float
    repetitions: int
    infinite: bool


def region_mean_intensity(vol: ComplexVolume, depth_m, region, gain=None):
    """Mean |U|^2 over ``region = (r0, r1, c0, c1)`` in the plane nearest depth.

    ``gain`` (a GainCurve) multiplies the intensity.
    """
    d = int(np.argmin(np.abs(vol.depths_m - depth_m)))
    r0, r1, c0, c1 = region
    patch = np.abs(vol.data[d, r0:r1, c0:c1]) ** 2
    if patch.size == 0:
        raise ContractError("empty SNR region")
    value = float(patch.mean())
    if gain is not None:
        value *= float(gain.at(vol.depths_m[d]))
    return value


def snr_eval(samples: Dict[float, Sequence[float]], reference_depth_m=1.0) -> List[SNRRow]:
    """SNR = mean / sample std of per-repetition region intensities, per depth.

    ``normalized`` divides by the SNR at the reference depth (or the nearest
    depth present). Zero spread gives an infinite SNR, flagged in the row.
    """
    rows = []
    for z in sorted(samples):
        v = np.asarray(samples[z], float)
        if len(v) < 2:
            raise ContractError("SNR needs at least two repetitions per depth")
        if len(v) < 10:
            log.warning("SNR at %.3f m from only %d repetitions", z, len(v))
        mean = float(v.mean())
        std = float(v.std(ddof=1))
        inf = std == 0.0
        snr = math.inf if inf else mean / std
        rows.append(SNRRow(float(z), mean, std, snr, math.nan, len(v), inf))
    if rows:
        ref = min(rows, key=lambda r: abs(r.depth_m - reference_depth_m))
        for r in rows:
            if math.isfinite(ref.snr) and ref.snr != 0:
                r.normalized = r.snr / ref.snr
    return rows


def write_snr_csv(path, tables: Dict[str, List[SNRRow]]):
    """Columns: method, depth_m, snr, normalized_snr, mean, std, repetitions, infinite."""
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["method", "depth_m", "snr", "normalized_snr", "mean", "std",
                    "repetitions", "infinite"])
        for method, rows in tables.items():
            for r in rows:
                w.writerow([method, f"{r.depth_m:.4f}", f"{r.snr:.6g}", f"{r.normalized:.6g}",
                            f"{r.mean:.6g}", f"{r.std:.6g}", r.repetitions, int(r.infinite)])


# ---------------------------------------------------------------------------
# PSF

def fwhm_1d(profile, spacing=1.0):
    """Full width at half maximum around the peak, linearly interpolated.

    Returns (width, truncated) where ``truncated`` means the half-maximum
    crossing was not found on one side and the width is a lower bound.
    """
    p = np.asarray(profile, float)
    i = int(np.argmax(p))
    half = p[i] / 2.0
    truncated = False

    def crossing(step):
        nonlocal truncated
        j = i
        while 0 <= j + step < len(p) and p[j + step] > half:
            j += step
        k = j + step
        if not 0 <= k < len(p):
            truncated = True
            return float(j)
        # p[j] > half >= p[k]
        return j + step * (p[j] - half) / (p[j] - p[k])

    width = (crossing(1) - crossing(-1)) * spacing
    return width, truncated


@dataclass
class PSFRow:
    depth_m: float
    lateral_fwhm_m: float
    axial_fwhm_m: float
    peak_depth_m: float
    truncated: bool


def psf_eval(vol: ComplexVolume, target_depth_m) -> PSFRow:
    """Lateral (along x) and axial FWHM of |U|^2 through its global peak."""
    intensity = np.abs(vol.data) ** 2
    d, r, c = np.unravel_index(int(np.argmax(intensity)), intensity.shape)
    lateral, t1 = fwhm_1d(intensity[d, r, :], vol.pitch_m)
    spacing = float(vol.depths_m[1] - vol.depths_m[0]) if len(vol.depths_m) > 1 else 0.0
    axial, t2 = fwhm_1d(intensity[:, r, c], spacing)
    edge = d in (0, intensity.shape[0] - 1) or r in (0, intensity.shape[1] - 1) \
        or c in (0, intensity.shape[2] - 1)
    truncated = bool(t1 or t2 or edge)
    if truncated:
        log.warning("PSF at %.2f m touches the volume boundary; widths are lower bounds",
                    target_depth_m)
    return PSFRow(float(target_depth_m), lateral, axial, float(vol.depths_m[d]), truncated)


def write_psf_csv(path, rows: Sequence[PSFRow], extra_columns=None):
    """Columns: depth_m, lateral_fwhm_m, axial_fwhm_m, peak_depth_m, truncated (+ extras)."""
    extra_columns = extra_columns or {}
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(list(extra_columns) + ["depth_m", "lateral_fwhm_m", "axial_fwhm_m",
                                          "peak_depth_m", "truncated"])
        for i, r in enumerate(rows):
            w.writerow([v[i] for v in extra_columns.values()]
                       + [f"{r.depth_m:.4f}", f"{r.lateral_fwhm_m:.5f}",
                          f"{r.axial_fwhm_m:.5f}", f"{r.peak_depth_m:.4f}", int(r.truncated)])
