"""Three-bounce transient simulation and photon sampling.

Stands in for the laser, SPAD array and TCSPC hardware. Light leaves a laser
spot x_p on the wall, scatters once in the hidden scene and returns to a
pixel spot x_c. Each scene sample contributes

    scale * rho * dA * cos_in * cos_out / (|x_p - s|^2 |s - x_c|^2)

detections per second at flight time (|x_p - s| + |s - x_c|) / c, measured
from the wall (wall-side cosines are folded into the calibration).
"""
from __future__ import annotations

import configparser
import json
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Tuple

import numpy as np

from .config import (SPEED_OF_LIGHT, NoiseParams, SystemConfig, VoxelGridSpec,
                     calibration_offsets, laser_positions)
from .errors import ConfigError
from .stream import encode_frame

log = logging.getLogger(__name__)

FWHM_TO_SIGMA = 1.0 / (2.0 * math.sqrt(2.0 * math.log(2.0)))


@dataclass(frozen=True)
class MotionTrack:
    """Piecewise-linear offset keyframes ``(time_s, (dx, dy, dz))``, held
    constant outside the keyed interval."""

    keyframes: Tuple[Tuple[float, Tuple[float, float, float]], ...] = ()

    def offset(self, t):
        if not self.keyframes:
            return np.zeros(3)
        times = np.array([k[0] for k in self.keyframes])
        offs = np.array([k[1] for k in self.keyframes], dtype=float)
        return np.array([np.interp(t, times, offs[:, i]) for i in range(3)])

    @property
    def moving(self):
        return len({k[1] for k in self.keyframes}) > 1


@dataclass(frozen=True)
class SurfacePatch:
    center: Tuple[float, float, float]
    width_m: float
    height_m: float
    normal: Tuple[float, float, float] = (0.0, 0.0, -1.0)
    albedo: float = 1.0
    density_per_m2: float = 2500.0
    motion: MotionTrack = field(default_factory=MotionTrack)
    name: str = "patch"

    def samples(self):
        """Sample points (S, 3) at cell centres, unit normal, area per sample."""
        n = np.asarray(self.normal, float)
        n = n / np.linalg.norm(n)
        up = np.array([0.0, 1.0, 0.0]) if abs(n[1]) < 0.9 else np.array([1.0, 0.0, 0.0])
        u = np.cross(up, n)
        u /= np.linalg.norm(u)
        v = np.cross(n, u)
        step = 1.0 / math.sqrt(self.density_per_m2)
        nu = max(1, int(round(self.width_m / step)))
        nv = max(1, int(round(self.height_m / step)))
        a = (np.arange(nu) + 0.5) / nu - 0.5
        b = (np.arange(nv) + 0.5) / nv - 0.5
        aa, bb = np.meshgrid(a * self.width_m, b * self.height_m)
        pts = np.asarray(self.center, float) + aa.reshape(-1, 1) * u + bb.reshape(-1, 1) * v
        area = self.width_m * self.height_m / (nu * nv)
        return pts, n, area


@dataclass(frozen=True)
class PointTarget:
    position: Tuple[float, float, float]
    albedo_area_m2: float = 0.01
    motion: MotionTrack = field(default_factory=MotionTrack)
    name: str = "target"


@dataclass(frozen=True)
class Scene:
    patches: Tuple[SurfacePatch, ...] = ()
    targets: Tuple[PointTarget, ...] = ()

    @property
    def elements(self):
        return list(self.patches) + list(self.targets)

    @property
    def static(self):
        return not any(e.motion.moving for e in self.elements)

    def validate(self, volume: VoxelGridSpec, times=(0.0,)):
        for e in self.elements:
            if isinstance(e, SurfacePatch) and not 0 <= e.albedo <= 1:
                raise ConfigError(f"{e.name}: albedo outside [0, 1]")
            for t in list(times) + [k[0] for k in e.motion.keyframes]:
                if isinstance(e, SurfacePatch):
                    pts, _, _ = e.samples()
                    z = pts[:, 2] + e.motion.offset(t)[2]
                else:
                    z = np.array([e.position[2] + e.motion.offset(t)[2]])
                if z.min() < volume.z_min_m - 1e-9 or z.max() > volume.z_max_m + 1e-9:
                    raise ConfigError(f"{e.name} leaves the reconstruction volume at t={t}")

    def sample_set(self):
        """Static sample geometry: positions (S,3), normals (S,3) (zero for
        isotropic points), area-albedo weights (S,), owning element index (S,)."""
        pos, nrm, wts, owner = [], [], [], []
        for i, p in enumerate(self.patches):
            pts, n, area = p.samples()
            pos.append(pts)
            nrm.append(np.broadcast_to(n, pts.shape))
            wts.append(np.full(len(pts), p.albedo * area))
            owner.append(np.full(len(pts), i))
        for j, t in enumerate(self.targets):
            pos.append(np.asarray(t.position, float)[None])
            nrm.append(np.zeros((1, 3)))
            wts.append(np.array([t.albedo_area_m2]))
            owner.append(np.array([len(self.patches) + j]))
        if not pos:
            return np.zeros((0, 3)), np.zeros((0, 3)), np.zeros(0), np.zeros(0, dtype=int)
        return (np.concatenate(pos), np.concatenate(nrm), np.concatenate(wts),
                np.concatenate(owner))

    def offsets_at(self, t):
        """(elements, 3) motion offsets at time t."""
        if not self.elements:
            return np.zeros((0, 3))
        return np.stack([e.motion.offset(t) for e in self.elements])

    def poses(self, t):
        out = []
        for e, off in zip(self.elements, self.offsets_at(t)):
            base = e.center if isinstance(e, SurfacePatch) else e.position
            out.append({"name": e.name, "kind": "patch" if isinstance(e, SurfacePatch) else "target",
                        "position": [float(v) for v in np.asarray(base) + off]})
        return out


def _geometry(pos, nrm, wts, a, b):
    """Per-sample weights and path lengths for wall points a, b (broadcastable)."""
    va = a - pos
    vb = b - pos
    ra = np.linalg.norm(va, axis=-1)
    rb = np.linalg.norm(vb, axis=-1)
    with np.errstate(divide="ignore", invalid="ignore"):
        cos_a = np.einsum("...k,...k->...", va, nrm) / ra
        cos_b = np.einsum("...k,...k->...", vb, nrm) / rb
        iso = ~nrm.any(axis=-1)
        cos_a = np.where(iso, 1.0, np.maximum(cos_a, 0.0))
        cos_b = np.where(iso, 1.0, np.maximum(cos_b, 0.0))
        w = wts * cos_a * cos_b / (ra * ra * rb * rb)
    return w, ra + rb, (ra == 0) | (rb == 0)


def simulate_transient(scene: Scene, laser_point, sense_point, frame_time, config: SystemConfig,
                       stats=None):
    """Expected detection rate (photons/s) per time bin, time zero at the wall.

    Bin b represents time b * time_bin_s; each contribution is split
    linearly between the two bins around its flight time.
    """
    dt = config.phasor.time_bin_s
    nbins = config.phasor.bin_count
    hist = np.zeros(nbins)
    pos, nrm, wts, owner = scene.sample_set()
    if len(pos) == 0:
        return hist
    pos = pos + scene.offsets_at(frame_time)[owner]
    w, path, degenerate = _geometry(pos, nrm, wts, np.asarray(laser_point, float),
                                    np.asarray(sense_point, float))
    if degenerate.any():
        if stats is not None:
            stats["degenerate"] = stats.get("degenerate", 0) + int(degenerate.sum())
        log.warning("skipped %d scene samples touching the wall point", int(degenerate.sum()))
    keep = ~degenerate & np.isfinite(w)
    w = w[keep] * config.noise.signal_scale
    x = path[keep] / SPEED_OF_LIGHT / dt
    lo = np.floor(x).astype(np.int64)
    frac = x - lo
    for idx, part in ((lo, w * (1 - frac)), (lo + 1, w * frac)):
        ok = (idx >= 0) & (idx < nbins)
        hist += np.bincount(idx[ok], weights=part[ok], minlength=nbins)
    return hist


def sample_photons(rate_histogram, exposure_s, noise: NoiseParams, rng_seed, bin_width_s,
                   sync_period_s=200e-9, time_offset_s=0.0):
    """Draw one exposure's arrival times from an expected-rate histogram.

    Signal counts per bin are Poisson(rate * exposure * QE). Ambient and
    dark counts arrive uniformly while the gate is open, for the gate's
    share of every sync period. Signal photons get Gaussian timing jitter.
    ``time_offset_s`` shifts the histogram axis onto detector time (the gate
    is in detector time). Returns sorted times in seconds.
    """
    if exposure_s <= 0:
        raise ValueError("exposure must be positive")
    rng = np.random.default_rng(rng_seed)
    rates = np.asarray(rate_histogram, dtype=float)
    counts = rng.poisson(rates * exposure_s * noise.quantum_efficiency)
    bins = np.repeat(np.arange(len(rates)), counts)
    t = time_offset_s + (bins + rng.uniform(-0.5, 0.5, len(bins))) * bin_width_s
    sigma = noise.jitter_fwhm_s * FWHM_TO_SIGMA
    if sigma > 0:
        t = t + rng.normal(0.0, sigma, len(t))
    gate = noise.gate_off_s - noise.gate_on_s
    n_bg = rng.poisson((noise.ambient_rate_hz + noise.dark_rate_hz) * exposure_s
                       * gate / sync_period_s)
    t = np.concatenate([t, rng.uniform(noise.gate_on_s, noise.gate_off_s, n_bg)])
    t = t[(t >= noise.gate_on_s) & (t < noise.gate_off_s)]
    return np.sort(t)


# ---------------------------------------------------------------------------
# whole-frame simulation

@dataclass
class FramePhotons:
    """One frame of detections: parallel arrays over photons."""

    points: np.ndarray
    pixels: np.ndarray
    times_s: np.ndarray  # detector time, before the cable delay

    def __len__(self):
        return len(self.points)


class FrameSimulator:
    """Samples photon frames for a scene with a given scan/pixel layout.

    Equivalent in distribution to ``simulate_transient`` followed by
    ``sample_photons`` for every (scan point, pixel) pair, but draws photons
    straight from the scene samples: a pair's count is Poisson in its total
    rate and each photon picks a sample with probability proportional to
    that sample's rate. No time quantisation happens here (the encoder does
    that). Static scenes keep the per-pair tables when they fit in
    ``cache_elements``.
    """

    def __init__(self, scene: Scene, config: SystemConfig, points=None, pixel_positions=None,
                 laser_xyz=None, cache_elements=30_000_000, chunk_elements=4_000_000):
        self.scene = scene
        self.config = config
        lp = laser_positions(config.scan, config.relay) if laser_xyz is None else laser_xyz
        self.laser_xyz = np.asarray(lp, float).reshape(-1, 3)
        n_points = len(self.laser_xyz)
        self.points = np.arange(n_points) if points is None else np.asarray(points)
        self.pixel_xyz = (config.spads.pixel_positions() if pixel_positions is None
                          else np.asarray(pixel_positions, float))
        d_laser, d_spad = calibration_offsets(config)
        if laser_xyz is None:
            rows, cols = config.scan.point_rc(self.points)
            self.laser_offset = d_laser[rows, cols]
            self.laser_xyz = self.laser_xyz[rows * config.scan.cols + cols]
        else:
            self.laser_offset = np.linalg.norm(
                self.laser_xyz - np.asarray(config.relay.laser_origin), axis=-1) / SPEED_OF_LIGHT
        self.pixel_offset = np.linalg.norm(
            self.pixel_xyz - np.asarray(config.relay.detector_origin), axis=-1) / SPEED_OF_LIGHT
        self.dwell_s = config.exposure_per_point_s
        self._samples = scene.sample_set()
        s = max(1, len(self._samples[0]))
        q = len(self.pixel_xyz)
        self.chunk = max(1, chunk_elements // (q * s))
        self._cache = None
        if scene.static and 0 < len(self.points) * q * s <= cache_elements:
            self._cache = [self._tables(i, i + self.chunk, 0.0)
                           for i in range(0, len(self.points), self.chunk)]

    def _weights(self, lo, hi, frame_time):
        """Expected counts (B, Q, S) and wall-relative flight times for points lo..hi."""
        pos, nrm, wts, owner = self._samples
        idx = np.arange(lo, min(hi, len(self.points)))
        if self.scene.static:
            pos_b = (pos + self.scene.offsets_at(frame_time)[owner])[None]
        else:
            mid = frame_time + (self.points[idx] + 0.5) * self.dwell_s
            pos_b = np.stack([pos + self.scene.offsets_at(t)[owner] for t in mid])
        lp = self.laser_xyz[idx][:, None, None, :]
        px = self.pixel_xyz[None, :, None, :]
        w, path, degenerate = _geometry(pos_b[:, None], nrm[None, None], wts, lp, px)
        w = np.where(degenerate | ~np.isfinite(w), 0.0, w)
        w *= self.config.noise.signal_scale * self.dwell_s * self.config.noise.quantum_efficiency
        return idx, w, path / SPEED_OF_LIGHT

    def _tables(self, lo, hi, frame_time):
        """Sampling tables for scan points lo..hi.

        Returns (point indices, per-pair expected counts (B, Q), running
        cumulative rate over all pairs and samples (B*Q*S,), flight times
        (B*Q*S,)). The running sum makes one ``searchsorted`` serve every
        pair at once.
        """
        idx, w, tof = self._weights(lo, hi, frame_time)
        return idx, w.sum(axis=-1), np.cumsum(w, axis=None), tof.astype(np.float32).ravel()

    def expected_counts(self, frame_time=0.0):
        """Expected signal detections per (point, pixel) for one frame."""
        out = np.zeros((len(self.points), len(self.pixel_xyz)))
        for idx, totals, _, _ in self._iter_tables(frame_time):
            out[idx] = totals
        return out

    def _iter_tables(self, frame_time):
        if self._cache is not None:
            yield from self._cache
        else:
            for lo in range(0, len(self.points), self.chunk):
                yield self._tables(lo, lo + self.chunk, frame_time)

    def frame(self, rng, frame_time=0.0) -> FramePhotons:
        cfg = self.config
        noise = cfg.noise
        sigma = noise.jitter_fwhm_s * FWHM_TO_SIGMA
        q = len(self.pixel_xyz)
        s = len(self._samples[0])
        out_p, out_q, out_t = [], [], []
        if s:
            for idx, totals, running, tof in self._iter_tables(frame_time):
                counts = rng.poisson(totals).ravel()
                pair = np.flatnonzero(counts)
                if not len(pair):
                    continue
                rep = np.repeat(pair, counts[pair])
                start = pair * s
                base = np.where(start > 0, running[np.maximum(start - 1, 0)], 0.0)
                base = np.repeat(base, counts[pair])
                target = base + rng.uniform(0, 1, len(rep)) * totals.ravel()[rep]
                hit = np.searchsorted(running, target, side="right")
                hit = np.clip(hit, rep * s, rep * s + s - 1)
                b, qq = np.divmod(rep, q)
                t = tof[hit].astype(float)
                t += self.laser_offset[idx[b]] + self.pixel_offset[qq]
                out_p.append(self.points[idx[b]])
                out_q.append(qq)
                out_t.append(t)
        times = np.concatenate(out_t) if out_t else np.zeros(0)
        if sigma > 0:
            times = times + rng.normal(0.0, sigma, len(times))
        pts = np.concatenate(out_p) if out_p else np.zeros(0, dtype=np.int64)
        pix = np.concatenate(out_q) if out_q else np.zeros(0, dtype=np.int64)

        gate = noise.gate_off_s - noise.gate_on_s
        bg_rate = (noise.ambient_rate_hz + noise.dark_rate_hz) * self.dwell_s * gate \
            * cfg.rep_rate_hz
        if bg_rate > 0:
            bg = rng.poisson(bg_rate, size=(len(self.points), q))
            pair = np.flatnonzero(bg)
            rep = np.repeat(pair, bg.ravel()[pair])
            b, qq = np.divmod(rep, q)
            pts = np.concatenate([pts, self.points[b]])
            pix = np.concatenate([pix, qq])
            times = np.concatenate([times, rng.uniform(noise.gate_on_s, noise.gate_off_s,
                                                       len(rep))])
        keep = (times >= noise.gate_on_s) & (times < noise.gate_off_s)
        return FramePhotons(pts[keep], pix[keep], times[keep])


def expected_fdh(scene: Scene, config: SystemConfig, grid, freqs, frame_time=0.0,
                 jitter=True, chunk_elements=2_000_000) -> np.ndarray:
    """Noise-free FDH (K, rows, cols) that binning would see on average.

    Each (scan point, pixel) pair contributes the sum over scene samples of
    its expected counts times exp(i 2 pi f t) at the sample's wall-relative
    flight time, landing in the pair's virtual cell (pooled pixels add up,
    as in binning). Timing jitter enters as its characteristic function.
    """
    sim = FrameSimulator(scene, config, cache_elements=0, chunk_elements=chunk_elements)
    f = np.asarray(freqs.frequencies_hz, float)
    k = len(f)
    out = np.zeros((k, grid.rows * grid.cols), dtype=complex)
    if not len(sim._samples[0]):
        return out.reshape(k, grid.rows, grid.cols)
    q = len(sim.pixel_xyz)
    s = len(sim._samples[0])
    # frequencies on a regular grid are generated by repeated multiplication
    step = float(np.median(np.diff(f))) if k > 1 else 0.0
    regular = k == 1 or np.allclose(np.diff(f), step, rtol=0, atol=1e-6)
    for lo in range(0, len(sim.points), sim.chunk):
        idx, w, t = sim._weights(lo, lo + sim.chunk, frame_time)
        w = w.reshape(-1, s)
        t = t.reshape(-1, s)
        rows, cols = config.scan.point_rc(sim.points[idx])
        vcol = grid.column_map[np.repeat(cols, q), np.tile(np.arange(q), len(idx))]
        cell = np.repeat(rows, q) * grid.cols + vcol
        ok = vcol >= 0
        if regular:
            ph = np.exp(2j * np.pi * f[0] * t)
            inc = np.exp(2j * np.pi * step * t) if k > 1 else None
        for kk in range(k):
            if not regular:
                ph = np.exp(2j * np.pi * f[kk] * t)
            elif kk:
                ph *= inc
            val = (ph * w).sum(axis=1)
            out[kk] += np.bincount(cell[ok], weights=val.real[ok], minlength=out.shape[1]) \
                + 1j * np.bincount(cell[ok], weights=val.imag[ok], minlength=out.shape[1])
    if jitter:
        sigma = config.noise.jitter_fwhm_s * FWHM_TO_SIGMA
        out *= np.exp(-2 * (np.pi * f * sigma) ** 2)[:, None]
    return out.reshape(k, grid.rows, grid.cols)


def simulate_stream(scene: Scene, config: SystemConfig, n_frames: int, seed: int,
                    simulator: Optional[FrameSimulator] = None):
    """Simulate ``n_frames`` consecutive frames; return (words, manifest)."""
    rng = np.random.default_rng(seed)
    sim = simulator or FrameSimulator(scene, config)
    chunks = []
    frames = []
    drops = {}
    period = 1.0 / config.frame_rate_hz
    for i in range(n_frames):
        t0 = i * period
        ph = sim.frame(rng, t0)
        chunks.append(encode_frame(ph.points, ph.pixels, ph.times_s, config, rng, drops))
        frames.append({"frame_id": i, "time_s": t0, "photons": int(len(ph)),
                       "poses": scene.poses(t0 + period / 2)})
    words = np.concatenate(chunks) if chunks else np.zeros(0, dtype=np.uint32)
    manifest = {"seed": seed, "config_hash": f"{config.hash64():016x}",
                "frame_rate_hz": config.frame_rate_hz, "frames": frames, "dropped": drops}
    return words, manifest


def write_manifest(path, manifest):
    Path(path).write_text(json.dumps(manifest, indent=1, sort_keys=True))


# ---------------------------------------------------------------------------
# scene files

def _vec(text, n=3):
    vals = tuple(float(v) for v in text.split(","))
    if len(vals) != n:
        raise ConfigError(f"expected {n} comma-separated numbers, got {text!r}")
    return vals


def _keyframes(text):
    if not text.strip():
        return MotionTrack()
    frames = []
    for item in text.split(";"):
        if not item.strip():
            continue
        t, off = item.split(":", 1)
        frames.append((float(t), _vec(off)))
    frames.sort(key=lambda k: k[0])
    return MotionTrack(tuple(frames))


def parse_scene(text: str) -> Scene:
    """Scene file: one ``[patch.<name>]`` or ``[target.<name>]`` section per element.

    Example::

        [patch.board]
        center = 0.0, 0.0, 2.0
        width = 1.5
        height = 1.5
        albedo = 1.0
        keyframes = 0: 0,0,0; 10: 0.5,0,0
    """
    parser = configparser.ConfigParser(interpolation=None)
    try:
        parser.read_string(text)
    except configparser.Error as exc:
        raise ConfigError(str(exc)) from None
    patches, targets = [], []
    for name in parser.sections():
        sec = parser[name]
        kind = name.split(".", 1)[0]
        motion = _keyframes(sec.get("keyframes", ""))
        try:
            if kind == "patch":
                patches.append(SurfacePatch(
                    center=_vec(sec["center"]), width_m=float(sec["width"]),
                    height_m=float(sec["height"]),
                    normal=_vec(sec.get("normal", "0, 0, -1")),
                    albedo=float(sec.get("albedo", "1.0")),
                    density_per_m2=float(sec.get("density", "2500")),
                    motion=motion, name=name))
            elif kind == "target":
                targets.append(PointTarget(
                    position=_vec(sec["position"]),
                    albedo_area_m2=float(sec.get("albedo_area", "0.01")),
                    motion=motion, name=name))
            else:
                raise ConfigError(f"unknown scene section {name!r}")
        except KeyError as exc:
            raise ConfigError(f"scene section {name!r} lacks {exc}") from None
    return Scene(tuple(patches), tuple(targets))


def load_scene(path) -> Scene:
    return parse_scene(Path(path).read_text())


def scene_to_text(scene: Scene) -> str:
    lines = []

    def kf(m):
        return "; ".join(f"{t!r}: {', '.join(repr(v) for v in off)}" for t, off in m.keyframes)

    for p in scene.patches:
        lines += [f"[{p.name}]", f"center = {', '.join(map(repr, p.center))}",
                  f"normal = {', '.join(map(repr, p.normal))}",
                  f"width = {p.width_m!r}", f"height = {p.height_m!r}",
                  f"albedo = {p.albedo!r}", f"density = {p.density_per_m2!r}",
                  f"keyframes = {kf(p.motion)}", ""]
    for t in scene.targets:
        lines += [f"[{t.name}]", f"position = {', '.join(map(repr, t.position))}",
                  f"albedo_area = {t.albedo_area_m2!r}", f"keyframes = {kf(t.motion)}", ""]
    return "\n".join(lines)
