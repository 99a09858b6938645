"""Simulation sweeps behind the SNR, PSF and remapping evaluations."""
from __future__ import annotations

import logging
import math
import time
from dataclasses import dataclass
from typing import Dict, List, Optional, Sequence

import numpy as np

from .averaging import (FrameRing, PSFRow, SNRRow, depth_average, frames_for_depth, psf_eval,
                        region_mean_intensity, ring_capacity, snr_eval)
from .config import (RelayGeometry, ScanPattern, SpadLayout, SystemConfig,
                     VoxelGridSpec, build_frequency_set, derive_virtual_grid)
from .fdh import FrequencyDomainHistogram, apply_cell_weights, bin_frame
from .rsd import (ComplexVolume, TimeDomainBackprojector, form_image, precompute_kernels,
                  reconstruct)
from .simulator import FrameSimulator, PointTarget, Scene, SurfacePatch, expected_fdh
from .stream import StreamParser, encode_frame

log = logging.getLogger(__name__)


def reduced_config(size=64, base: Optional[SystemConfig] = None, **volume) -> SystemConfig:
    """A ``size`` x ``size`` virtual aperture with the default pitches.

    The wall shrinks to ``size`` virtual pitches and the scan keeps its
    column pitch, so the same pixel layout fills the same gaps.
    """
    base = base or SystemConfig()
    pitch = base.scan.row_pitch_m
    width = size * pitch
    cols = int(math.floor(width / base.scan.col_pitch_m + 1e-9)) + 1
    relay = RelayGeometry(width, width, base.relay.laser_origin, base.relay.detector_origin)
    scan = ScanPattern(size, cols, pitch, base.scan.col_pitch_m, base.scan.serpentine)
    vol = VoxelGridSpec(**{**dict(z_min_m=base.volume.z_min_m, z_max_m=base.volume.z_max_m,
                                  depth_spacing_m=base.volume.depth_spacing_m),
                           **volume, "rows": size, "cols": size})
    return base.replace(relay=relay, scan=scan, volume=vol)


class FrameReconstructor:
    """Events -> FDH -> complex volume with the pipeline's settings."""

    def __init__(self, config: SystemConfig, grid=None, kernels=None, freqs=None):
        self.config = config
        self.grid = grid or derive_virtual_grid(config.scan, config.spads, config.relay)
        self.freqs = freqs or build_frequency_set(config.phasor)
        tune = config.pipeline
        self.kernels = kernels or precompute_kernels(self.grid, config.volume, self.freqs,
                                                     tune.precision, tune.memory_budget_bytes)
        self.weights = self.grid.cell_weights()

    def fdh(self, events) -> FrequencyDomainHistogram:
        tune = self.config.pipeline
        raw = bin_frame(events, self.freqs, (self.grid.rows, self.grid.cols), tune.table_size,
                        tune.binning_workers)
        return apply_cell_weights(raw, self.weights)

    def volume(self, fdh, planes=None) -> ComplexVolume:
        return reconstruct(fdh, self.kernels, workers=self.config.pipeline.reconstruction_workers,
                           planes=planes)

    def __call__(self, events, planes=None):
        return self.volume(self.fdh(events), planes)


def capture_frame(sim: FrameSimulator, parser: StreamParser, rng, frame_time=0.0):
    """Simulate one frame and push it through encode and parse."""
    ph = sim.frame(rng, frame_time)
    words = encode_frame(ph.points, ph.pixels, ph.times_s, sim.config, rng)
    frames = parser.feed(words)
    return frames[0]


# ---------------------------------------------------------------------------
# SNR sweep

@dataclass
class SNRSweep:
    tables: Dict[str, List[SNRRow]]
    photons: Dict[float, float]
    seconds: float


def patch_scene(depth_m, size_m=1.5, density_per_m2=1111.0, albedo=1.0):
    return Scene(patches=(SurfacePatch((0.0, 0.0, depth_m), size_m, size_m, albedo=albedo,
                                       density_per_m2=density_per_m2, name="patch.square"),))


def patch_region(config: SystemConfig, grid, size_m=1.5):
    """Voxel bounding box (r0, r1, c0, c1) of a centred square patch."""
    half = size_m / 2
    xs = grid.x0_m + grid.pitch_m * np.arange(grid.cols)
    ys = grid.y0_m + grid.pitch_m * np.arange(grid.rows)
    c = np.flatnonzero(np.abs(xs) <= half)
    r = np.flatnonzero(np.abs(ys) <= half)
    return int(r[0]), int(r[-1]) + 1, int(c[0]), int(c[-1]) + 1


def snr_sweep(config: SystemConfig, depths_m: Sequence[float], trials: int, seed: int,
              patch_m=1.5, density_per_m2=1111.0, methods=("bp", "rsd", "rsd_avg"),
              reference_depth_m=1.0, progress=None) -> SNRSweep:
    """Repeated simulated captures of a square patch at each depth.

    Every trial is one frame of independent photon noise. ``rsd_avg`` is the
    output of the depth-averaging ring after it has filled, so each of its
    samples averages ``frames_for_depth(z)`` consecutive frames. The
    intensity statistic is the mean |V|^2 over the patch's bounding box in
    the plane at the patch depth.
    """
    t0 = time.perf_counter()
    depths = np.asarray(depths_m, float)
    spacing = float(np.min(np.diff(depths))) if len(depths) > 1 else 1.0
    z_hi = float(depths[-1]) if len(depths) > 1 else float(depths[0]) + spacing
    cfg = config.replace(volume=VoxelGridSpec(float(depths[0]), z_hi, spacing,
                                              config.volume.rows, config.volume.cols))
    plane_depths = cfg.volume.depths
    recon = FrameReconstructor(cfg)
    grid = recon.grid
    region = patch_region(cfg, grid, patch_m)
    scale = cfg.pipeline.depth_scale_per_m
    samples = {m: {} for m in methods}
    photons = {}
    rng = np.random.default_rng(seed)
    for z in depths:
        d = int(np.argmin(np.abs(plane_depths - z)))
        sim = FrameSimulator(patch_scene(z, patch_m, density_per_m2), cfg)
        parser = StreamParser(cfg, grid)
        bp = TimeDomainBackprojector(grid, [plane_depths[d]], cfg.phasor.time_bin_s) \
            if "bp" in methods else None
        warm = frames_for_depth(z, scale) - 1 if "rsd_avg" in methods else 0
        ring = FrameRing(max(1, ring_capacity(z, scale)))
        vals = {m: [] for m in methods}
        counts = []
        for i in range(trials + warm):
            events = capture_frame(sim, parser, rng, 0.0)
            counts.append(len(events))
            vol = recon(events, planes=[d])
            ring.push(vol)
            if i < warm:
                continue
            if "rsd" in methods:
                vals["rsd"].append(region_mean_intensity(vol, plane_depths[d], region))
            if "rsd_avg" in methods:
                avg = depth_average(ring, scale)
                vals["rsd_avg"].append(region_mean_intensity(avg, plane_depths[d], region))
            if bp is not None:
                vals["bp"].append(region_mean_intensity(bp(events), plane_depths[d], region))
        for m in methods:
            samples[m][float(z)] = vals[m]
        photons[float(z)] = float(np.mean(counts))
        if progress:
            progress(f"depth {z:.2f} m: {photons[float(z)]:.0f} events/frame")
    tables = {m: snr_eval(samples[m], reference_depth_m) for m in methods}
    return SNRSweep(tables, photons, time.perf_counter() - t0)


# ---------------------------------------------------------------------------
# PSF sweep

def psf_sweep(config: SystemConfig, depths_m: Sequence[float], half_depth_window_m=0.3,
              target_area_m2=1e-3) -> List[PSFRow]:
    """Noise-free point-target reconstructions; FWHM of |U|^2 at each depth.

    Each depth gets its own volume spanning +-``half_depth_window_m`` around
    the target so the axial profile is resolved without a huge kernel set.
    """
    rows = []
    grid = derive_virtual_grid(config.scan, config.spads, config.relay)
    freqs = build_frequency_set(config.phasor)
    for z in depths_m:
        vol_spec = VoxelGridSpec(max(1e-3, z - half_depth_window_m), z + half_depth_window_m,
                                 config.volume.depth_spacing_m, grid.rows, grid.cols)
        cfg = config.replace(volume=vol_spec)
        scene = Scene(targets=(PointTarget((0.0, 0.0, float(z)), target_area_m2),))
        data = expected_fdh(scene, cfg, grid, freqs)
        fdh = apply_cell_weights(FrequencyDomainHistogram(data, 0, 0), grid.cell_weights())
        ks = precompute_kernels(grid, vol_spec, freqs, "double",
                                config.pipeline.memory_budget_bytes, lazy=True)
        rows.append(psf_eval(reconstruct(fdh, ks), z))
    return rows


# ---------------------------------------------------------------------------
# remapping fidelity

def dense_single_pixel_config(config: SystemConfig) -> SystemConfig:
    """Same wall and volume, laser on every virtual column, one pixel at x_c,1."""
    scan = ScanPattern(config.scan.rows, int(round(config.relay.wall_width_m
                                                   / config.scan.row_pitch_m)),
                       config.scan.row_pitch_m, config.scan.row_pitch_m, config.scan.serpentine)
    spads = SpadLayout(1, (0.0,), ((0, 0),), config.spads.windows_s, config.spads.reference_xy)
    return config.replace(scan=scan, spads=spads)


def expected_image(scene: Scene, config: SystemConfig, freqs=None):
    """Noise-free max-over-depth image of a scene for the given scan/pixel layout."""
    grid = derive_virtual_grid(config.scan, config.spads, config.relay)
    freqs = freqs or build_frequency_set(config.phasor)
    data = expected_fdh(scene, config, grid, freqs)
    fdh = apply_cell_weights(FrequencyDomainHistogram(data, 0, 0), grid.cell_weights())
    ks = precompute_kernels(grid, config.volume, freqs, "double",
                            config.pipeline.memory_budget_bytes, lazy=True)
    return form_image(reconstruct(fdh, ks))[0]


def normalized_cross_correlation(a, b):
    """Zero-lag Pearson correlation of two images."""
    a = np.asarray(a, float).ravel()
    b = np.asarray(b, float).ravel()
    a = a - a.mean()
    b = b - b.mean()
    denom = math.sqrt(float(a @ a) * float(b @ b))
    return float(a @ b) / denom if denom else 0.0
