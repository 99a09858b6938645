"""System configuration, geometry derivation and the phasor frequency set.

All types here are frozen dataclasses: build them once, then share them
freely between pipeline stages.

Coordinates: the relay wall is the plane z = 0, centred on the origin, and
the hidden scene lives at z > 0. Rows run along y, columns along x.
"""
from __future__ import annotations

import configparser
import dataclasses
import hashlib
import io
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, Tuple

import numpy as np

from .errors import ConfigError

SPEED_OF_LIGHT = 2.998e8  # m/s, vacuum; no refractive correction

Vec3 = Tuple[float, float, float]


def _default_offsets(count=28, span=0.08):
    if count == 1:
        return (0.0,)
    return tuple(q * span / (count - 1) for q in range(count))


def _default_channel_map(count=28, windows=4):
    return tuple((q // windows, q % windows) for q in range(count))


@dataclass(frozen=True)
class RelayGeometry:
    wall_width_m: float = 1.9
    wall_height_m: float = 1.9
    laser_origin: Vec3 = (0.05, 0.0, 2.0)
    detector_origin: Vec3 = (-0.05, 0.0, 2.0)

    def validate(self):
        if self.wall_width_m <= 0 or self.wall_height_m <= 0:
            raise ConfigError("relay wall dimensions must be positive")
        for name in ("laser_origin", "detector_origin"):
            origin = getattr(self, name)
            if len(origin) != 3:
                raise ConfigError(f"relay.{name} must be a 3-vector")
            if origin[2] == 0:
                raise ConfigError(f"relay.{name} lies on the wall plane")


@dataclass(frozen=True)
class ScanPattern:
    rows: int = 190
    cols: int = 22
    row_pitch_m: float = 0.01
    col_pitch_m: float = 0.09
    serpentine: bool = False

    @property
    def point_count(self):
        return self.rows * self.cols

    def validate(self, relay: RelayGeometry):
        if self.rows < 1 or self.cols < 1:
            raise ConfigError("scan grid needs at least one row and column")
        if self.row_pitch_m <= 0 or self.col_pitch_m <= 0:
            raise ConfigError("scan pitches must be positive")
        tol = 1e-9
        if self.rows * self.row_pitch_m > relay.wall_height_m + tol:
            raise ConfigError("scan rows do not fit on the relay wall")
        if (self.cols - 1) * self.col_pitch_m > relay.wall_width_m + tol:
            raise ConfigError("scan columns do not fit on the relay wall")

    def point_rc(self, index):
        """Laser (row, col) for raster index ``index`` (scalar or array)."""
        index = np.asarray(index)
        row = index // self.cols
        col = index % self.cols
        if self.serpentine:
            col = np.where(row % 2 == 1, self.cols - 1 - col, col)
        return row, col


@dataclass(frozen=True)
class SpadLayout:
    pixel_count: int = 28
    offsets_m: Tuple[float, ...] = field(default_factory=_default_offsets)
    channel_map: Tuple[Tuple[int, int], ...] = field(default_factory=_default_channel_map)
    windows_s: Tuple[Tuple[float, float], ...] = (
        (0.0, 40e-9), (40e-9, 90e-9), (90e-9, 140e-9), (140e-9, 180e-9))
    # x_c,1: the rightmost pixel's spot on the wall; pixel q sits at
    # reference - offset_q along x.
    reference_xy: Tuple[float, float] = (0.04, 0.0)

    def validate(self, scan: ScanPattern):
        if self.pixel_count < 1:
            raise ConfigError("need at least one SPAD pixel")
        if len(self.offsets_m) != self.pixel_count:
            raise ConfigError("spads.offsets_m length differs from pixel_count")
        if len(self.channel_map) != self.pixel_count:
            raise ConfigError("spads.channel_map length differs from pixel_count")
        for q, dx in enumerate(self.offsets_m):
            if abs(dx) >= scan.col_pitch_m:
                raise ConfigError(
                    f"pixel {q} offset {dx} m exceeds the column pitch {scan.col_pitch_m} m")
        pairs = [tuple(p) for p in self.channel_map]
        if len(set(pairs)) != len(pairs):
            raise ConfigError("spads.channel_map assigns two pixels to one (channel, window)")
        for ch, w in pairs:
            if not 0 <= ch < 63:
                raise ConfigError(f"TCSPC channel {ch} out of range")
            if not 0 <= w < len(self.windows_s):
                raise ConfigError(f"delay window {w} out of range")
        edges = sorted(self.windows_s)
        for lo, hi in edges:
            if hi <= lo or lo < 0:
                raise ConfigError("delay windows must be non-empty and nonnegative")
        for (_, hi), (lo, _) in zip(edges, edges[1:]):
            if lo < hi:
                raise ConfigError("delay windows overlap")

    def pixel_id(self, channel, window):
        return self._lookup().get((int(channel), int(window)))

    def _lookup(self):
        return {tuple(p): q for q, p in enumerate(self.channel_map)}

    def pixel_positions(self):
        """(Q, 3) wall positions x_c,q."""
        off = np.asarray(self.offsets_m, dtype=float)
        pos = np.zeros((self.pixel_count, 3))
        pos[:, 0] = self.reference_xy[0] - off
        pos[:, 1] = self.reference_xy[1]
        return pos


@dataclass(frozen=True)
class PhasorParams:
    virtual_wavelength_m: float = 0.08
    cycles_in_pulse: float = 5.0
    spectral_cutoff: float = 0.01
    time_bin_s: float = 8e-12
    histogram_span_s: float = 200e-9

    @property
    def bin_count(self):
        return int(round(self.histogram_span_s / self.time_bin_s))

    def validate(self):
        if self.virtual_wavelength_m <= 0:
            raise ConfigError("virtual wavelength must be positive")
        if self.cycles_in_pulse < 1:
            raise ConfigError("pulse needs at least one cycle")
        if not 0 < self.spectral_cutoff < 1:
            raise ConfigError("spectral_cutoff must lie in (0, 1)")
        if self.time_bin_s <= 0 or self.histogram_span_s <= 0:
            raise ConfigError("time bin and histogram span must be positive")
        ratio = self.histogram_span_s / self.time_bin_s
        if abs(ratio - round(ratio)) > 1e-6 * ratio:
            raise ConfigError("histogram span is not an integer number of time bins")


@dataclass(frozen=True)
class VoxelGridSpec:
    z_min_m: float = 1.0
    z_max_m: float = 3.5
    depth_spacing_m: float = 0.02
    rows: int = 190
    cols: int = 190

    @property
    def depth_count(self):
        return int(math.floor((self.z_max_m - self.z_min_m) / self.depth_spacing_m + 1e-9)) + 1

    @property
    def depths(self):
        return self.z_min_m + self.depth_spacing_m * np.arange(self.depth_count)

    def validate(self):
        if self.z_min_m <= 0:
            raise ConfigError("volume must start in front of the wall (z_min > 0)")
        if self.z_max_m <= self.z_min_m:
            raise ConfigError("volume z_max must exceed z_min")
        if self.depth_spacing_m <= 0 or self.rows < 1 or self.cols < 1:
            raise ConfigError("volume counts and spacing must be positive")


@dataclass(frozen=True)
class NoiseParams:
    ambient_rate_hz: float = 0.0
    dark_rate_hz: float = 0.0
    jitter_fwhm_s: float = 85e-12
    quantum_efficiency: float = 1.0
    # gate in per-pixel detector time, i.e. before the cable delay offset
    gate_on_s: float = 0.0
    gate_off_s: float = 40e-9
    # expected detections/s for a unit albedo-area product at unit
    # geometric factor (1 / m^4)
    signal_scale: float = 1e5

    def validate(self):
        if min(self.ambient_rate_hz, self.dark_rate_hz, self.jitter_fwhm_s) < 0:
            raise ConfigError("noise rates and jitter must be nonnegative")
        if not 0 < self.quantum_efficiency <= 1:
            raise ConfigError("quantum efficiency must lie in (0, 1]")
        if self.gate_off_s <= self.gate_on_s:
            raise ConfigError("gate window must have positive length")
        if self.signal_scale < 0:
            raise ConfigError("signal_scale must be nonnegative")


@dataclass(frozen=True)
class PipelineTuning:
    queue_capacity: int = 4
    binning_workers: int = 1
    reconstruction_workers: int = 1
    drop_policy: str = "block"
    precision: str = "double"
    table_size: int = 65536
    averaging: bool = True
    depth_scale_per_m: float = 1.0
    gain_file: str = ""
    memory_budget_bytes: int = 2_000_000_000

    def validate(self):
        if self.queue_capacity < 1:
            raise ConfigError("queue capacity must be at least 1")
        if self.binning_workers < 1 or self.reconstruction_workers < 1:
            raise ConfigError("worker counts must be at least 1")
        if self.drop_policy not in ("block", "drop-oldest"):
            raise ConfigError(f"unknown drop policy {self.drop_policy!r}")
        if self.precision not in ("double", "single"):
            raise ConfigError(f"unknown precision {self.precision!r}")
        if self.table_size < 1024:
            raise ConfigError("phase table needs at least 1024 entries")
        if self.depth_scale_per_m <= 0:
            raise ConfigError("depth_scale_per_m must be positive")


@dataclass(frozen=True)
class SystemConfig:
    relay: RelayGeometry = field(default_factory=RelayGeometry)
    scan: ScanPattern = field(default_factory=ScanPattern)
    spads: SpadLayout = field(default_factory=SpadLayout)
    phasor: PhasorParams = field(default_factory=PhasorParams)
    volume: VoxelGridSpec = field(default_factory=VoxelGridSpec)
    noise: NoiseParams = field(default_factory=NoiseParams)
    pipeline: PipelineTuning = field(default_factory=PipelineTuning)
    frame_rate_hz: float = 5.0
    rep_rate_hz: float = 5e6

    def __post_init__(self):
        self.validate()

    def validate(self):
        if self.frame_rate_hz <= 0 or self.rep_rate_hz <= 0:
            raise ConfigError("frame and repetition rates must be positive")
        self.relay.validate()
        self.scan.validate(self.relay)
        self.spads.validate(self.scan)
        self.phasor.validate()
        self.volume.validate()
        self.noise.validate()
        self.pipeline.validate()
        if self.frame_syncs < self.scan.point_count:
            raise ConfigError("fewer than one laser pulse per scan point")
        if max(hi for _, hi in self.spads.windows_s) > self.sync_period_s * (1 + 1e-9):
            raise ConfigError("delay windows extend past the sync period")

    @property
    def exposure_per_point_s(self):
        return 1.0 / (self.frame_rate_hz * self.scan.point_count)

    @property
    def frame_syncs(self):
        """Laser pulses per frame (rep rate / frame rate, rounded)."""
        return int(round(self.rep_rate_hz / self.frame_rate_hz))

    @property
    def pulses_per_point(self):
        """Laser pulses per scan point; fractional when they do not divide evenly."""
        return self.frame_syncs / self.scan.point_count

    @property
    def sync_period_s(self):
        return 1.0 / self.rep_rate_hz

    def point_of_sync(self, sync):
        """Scan point index for sync counts since frame start: floor(sync / pulses_per_point),
        in exact integer arithmetic."""
        return np.asarray(sync, dtype=np.int64) * self.scan.point_count // self.frame_syncs

    def first_sync(self, point):
        """First sync count belonging to scan point ``point``."""
        p = np.asarray(point, dtype=np.int64)
        n = self.scan.point_count
        return (p * self.frame_syncs + n - 1) // n

    def replace(self, **sections):
        return dataclasses.replace(self, **sections)

    def with_overrides(self, overrides):
        """Apply ``section.key=value`` strings (CLI ``--set``)."""
        text = to_ini(self)
        parser = _parser()
        parser.read_string(text)
        for item in overrides:
            if "=" not in item or "." not in item.split("=", 1)[0]:
                raise ConfigError(f"override {item!r} is not section.key=value")
            key, value = item.split("=", 1)
            section, name = key.strip().split(".", 1)
            if not parser.has_section(section) or not parser.has_option(section, name):
                raise ConfigError(f"unknown config key {key.strip()!r}")
            parser.set(section, name, value.strip())
        return _from_parser(parser)

    def hash64(self):
        digest = hashlib.blake2b(to_ini(self).encode(), digest_size=8).digest()
        return int.from_bytes(digest, "little")


# ---------------------------------------------------------------------------
# INI serialisation

_SECTIONS = {
    "relay": RelayGeometry,
    "scan": ScanPattern,
    "spads": SpadLayout,
    "phasor": PhasorParams,
    "volume": VoxelGridSpec,
    "noise": NoiseParams,
    "pipeline": PipelineTuning,
}


def _parser():
    p = configparser.ConfigParser(interpolation=None)
    p.optionxform = str
    return p


def _fmt(value):
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, float):
        return repr(value)
    if isinstance(value, tuple):
        if value and isinstance(value[0], tuple):
            return ", ".join(":".join(_fmt(v) for v in pair) for pair in value)
        return ", ".join(_fmt(v) for v in value)
    return str(value)


def _parse_scalar(text, like):
    text = text.strip()
    if isinstance(like, bool):
        low = text.lower()
        if low not in ("true", "false", "1", "0", "yes", "no", "on", "off"):
            raise ConfigError(f"expected a boolean, got {text!r}")
        return low in ("true", "1", "yes", "on")
    if isinstance(like, int):
        return int(float(text)) if "e" in text.lower() else int(text)
    if isinstance(like, float):
        return float(text)
    return text


def _parse_value(text, like):
    try:
        if isinstance(like, tuple):
            items = [s for s in (t.strip() for t in text.split(",")) if s]
            if like and isinstance(like[0], tuple) or any(":" in s for s in items):
                proto = like[0] if like else (0.0, 0.0)
                return tuple(tuple(_parse_scalar(v, p) for v, p in zip(s.split(":"), proto))
                             for s in items)
            proto = like[0] if like else 0.0
            return tuple(_parse_scalar(s, proto) for s in items)
        return _parse_scalar(text, like)
    except ValueError as exc:
        raise ConfigError(f"cannot parse {text!r}: {exc}") from None


def to_ini(config: SystemConfig) -> str:
    parser = _parser()
    parser["system"] = {"frame_rate_hz": _fmt(config.frame_rate_hz),
                        "rep_rate_hz": _fmt(config.rep_rate_hz)}
    for name in _SECTIONS:
        sub = getattr(config, name)
        parser[name] = {f.name: _fmt(getattr(sub, f.name)) for f in dataclasses.fields(sub)}
    buf = io.StringIO()
    parser.write(buf)
    return buf.getvalue()


def _from_parser(parser) -> SystemConfig:
    kwargs = {}
    for name, cls in _SECTIONS.items():
        proto = cls()
        values = {}
        if parser.has_section(name):
            known = {f.name for f in dataclasses.fields(cls)}
            for key, text in parser.items(name):
                if key not in known:
                    raise ConfigError(f"unknown config key {name}.{key}")
                values[key] = _parse_value(text, getattr(proto, key))
        # pixel-count driven defaults follow the configured count
        if cls is SpadLayout and "pixel_count" in values:
            n = values["pixel_count"]
            values.setdefault("offsets_m", _default_offsets(n))
            values.setdefault("channel_map", _default_channel_map(n))
        kwargs[name] = cls(**values)
    system = dict(parser.items("system")) if parser.has_section("system") else {}
    extra = set(system) - {"frame_rate_hz", "rep_rate_hz"}
    if extra:
        raise ConfigError(f"unknown config key system.{sorted(extra)[0]}")
    for key in ("frame_rate_hz", "rep_rate_hz"):
        if key in system:
            kwargs[key] = _parse_value(system[key], 1.0)
    return SystemConfig(**kwargs)


def from_ini(text: str) -> SystemConfig:
    parser = _parser()
    try:
        parser.read_string(text)
    except configparser.Error as exc:
        raise ConfigError(str(exc)) from None
    return _from_parser(parser)


def load_config(path) -> SystemConfig:
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"config file {path} not found")
    return from_ini(path.read_text())


def save_config(config: SystemConfig, path):
    Path(path).write_text(to_ini(config))


# ---------------------------------------------------------------------------
# Phasor frequency set

@dataclass(frozen=True)
class FrequencySet:
    frequencies_hz: np.ndarray
    weights: np.ndarray  # complex
    center_hz: float
    spacing_hz: float

    @property
    def count(self):
        return len(self.frequencies_hz)


def pulse_sigma_t(phasor: PhasorParams):
    """Temporal std of the Gaussian envelope: FWHM = cycles * lambda / c."""
    fwhm = phasor.cycles_in_pulse * phasor.virtual_wavelength_m / SPEED_OF_LIGHT
    return fwhm / (2.0 * math.sqrt(2.0 * math.log(2.0)))


def build_frequency_set(phasor: PhasorParams) -> FrequencySet:
    phasor.validate()
    f_c = SPEED_OF_LIGHT / phasor.virtual_wavelength_m
    sigma_f = 1.0 / (2.0 * math.pi * pulse_sigma_t(phasor))
    df = 1.0 / phasor.histogram_span_s
    nyquist = 0.5 / phasor.time_bin_s
    # only bins near the centre can pass the cutoff
    reach = sigma_f * math.sqrt(2.0 * math.log(1.0 / phasor.spectral_cutoff)) + 2 * df
    k_lo = max(0, math.floor((f_c - reach) / df))
    k_hi = min(math.ceil((f_c + reach) / df), math.floor(nyquist / df))
    k = np.arange(k_lo, k_hi + 1)
    freqs = k * df
    w = np.exp(-0.5 * ((freqs - f_c) / sigma_f) ** 2)
    if w.size == 0 or w.max() <= 0:
        raise ConfigError("no phasor frequencies survive the spectral cutoff")
    keep = w >= phasor.spectral_cutoff * w.max()
    if not keep.any():
        raise ConfigError("no phasor frequencies survive the spectral cutoff")
    return FrequencySet(freqs[keep].astype(float), w[keep].astype(complex), f_c, df)


# ---------------------------------------------------------------------------
# Virtual aperture

@dataclass(frozen=True)
class VirtualGrid:
    rows: int
    cols: int
    pitch_m: float
    # column_map[j, q] -> virtual column, -1 where it falls off the wall
    column_map: np.ndarray
    sense_point: np.ndarray  # x_c,1
    x0_m: float  # x of virtual column 0
    y0_m: float  # y of row 0
    multiplicity: np.ndarray  # pixels pooled into each virtual column

    @property
    def cell_count(self):
        return self.rows * self.cols

    def cell_positions(self):
        """(rows, cols, 3) wall positions of the virtual laser grid."""
        ys = self.y0_m + self.pitch_m * np.arange(self.rows)
        xs = self.x0_m + self.pitch_m * np.arange(self.cols)
        pos = np.zeros((self.rows, self.cols, 3))
        pos[..., 0] = xs[None, :]
        pos[..., 1] = ys[:, None]
        return pos

    def cell_weights(self):
        """Per-cell factor averaging the pixels pooled into a column."""
        m = self.multiplicity.astype(float)
        w = np.where(m > 0, 1.0 / np.maximum(m, 1), 0.0)
        return np.broadcast_to(w[None, :], (self.rows, self.cols))


def laser_positions(scan: ScanPattern, relay: RelayGeometry):
    """(rows, cols, 3) physical laser spots on the wall."""
    x0 = -relay.wall_width_m / 2 + scan.row_pitch_m / 2
    y0 = -(scan.rows - 1) * scan.row_pitch_m / 2
    pos = np.zeros((scan.rows, scan.cols, 3))
    pos[..., 0] = (x0 + scan.col_pitch_m * np.arange(scan.cols))[None, :]
    pos[..., 1] = (y0 + scan.row_pitch_m * np.arange(scan.rows))[:, None]
    return pos


def derive_virtual_grid(scan: ScanPattern, spads: SpadLayout, relay: RelayGeometry,
                        strict: bool = False) -> VirtualGrid:
    """Map each (laser column j, pixel q) onto a column of the dense virtual grid.

    Pixels of the same laser column that round onto the same virtual column
    are pooled. Two *different* laser columns landing on one virtual column
    is a configuration error, as is any sharing at all when ``strict``.
    """
    scan.validate(relay)
    spads.validate(scan)
    pitch = scan.row_pitch_m
    cols = int(round(relay.wall_width_m / pitch))
    if abs(cols * pitch - relay.wall_width_m) > 1e-9 * relay.wall_width_m:
        raise ConfigError("wall width is not a whole number of virtual pitches")
    j = np.arange(scan.cols)[:, None]
    off = np.asarray(spads.offsets_m, dtype=float)[None, :]
    mapping = np.rint((j * scan.col_pitch_m + off) / pitch).astype(np.int64)
    mapping = np.where((mapping >= 0) & (mapping < cols), mapping, -1)

    owner = {}
    clashes = []
    for jj in range(scan.cols):
        for q in range(spads.pixel_count):
            v = int(mapping[jj, q])
            if v < 0:
                continue
            prev = owner.setdefault(v, (jj, q))
            if prev != (jj, q) and (strict or prev[0] != jj):
                clashes.append((prev, (jj, q), v))
    if clashes:
        listing = "; ".join(f"(j={a[0]},q={a[1]}) & (j={b[0]},q={b[1]}) -> col {v}"
                            for a, b, v in clashes[:10])
        raise ConfigError(f"virtual column collisions: {listing}")

    used = mapping[mapping >= 0]
    multiplicity = np.bincount(used, minlength=cols)
    ref = spads.reference_xy
    return VirtualGrid(
        rows=scan.rows,
        cols=cols,
        pitch_m=pitch,
        column_map=mapping,
        sense_point=np.array([ref[0], ref[1], 0.0]),
        x0_m=-relay.wall_width_m / 2 + pitch / 2,
        y0_m=-(scan.rows - 1) * pitch / 2,
        multiplicity=multiplicity,
    )


def calibration_offsets(config: SystemConfig, table=None) -> Tuple[np.ndarray, np.ndarray]:
    """Flight times device->laser spot (rows, cols) and pixel spot->device (Q,), seconds.

    Distances are analytic unless ``table`` (see :func:`load_distance_table`)
    supplies measured ones.
    """
    lp = laser_positions(config.scan, config.relay)
    d_laser = np.linalg.norm(lp - np.asarray(config.relay.laser_origin), axis=-1)
    pp = config.spads.pixel_positions()
    d_spad = np.linalg.norm(pp - np.asarray(config.relay.detector_origin), axis=-1)
    if table:
        for (r, c), d in table.get("laser", {}).items():
            d_laser[r, c] = d
        for q, d in table.get("spad", {}).items():
            d_spad[q] = d
    return d_laser / SPEED_OF_LIGHT, d_spad / SPEED_OF_LIGHT


def load_distance_table(path) -> Dict[str, np.ndarray]:
    """Measured calibration distances overriding the analytic ones.

    Plain text, ``laser r c metres`` and ``spad q metres`` lines.
    """
    laser, spad = {}, {}
    for line in Path(path).read_text().splitlines():
        parts = line.split("#", 1)[0].split()
        if not parts:
            continue
        if parts[0] == "laser" and len(parts) == 4:
            laser[(int(parts[1]), int(parts[2]))] = float(parts[3])
        elif parts[0] == "spad" and len(parts) == 3:
            spad[int(parts[1])] = float(parts[2])
        else:
            raise ConfigError(f"bad distance table line: {line!r}")
    return {"laser": laser, "spad": spad}
