"""Phasor-field Rayleigh-Sommerfeld (RSD) reconstruction.

The virtual aperture is a regular grid on the wall, so propagation from the
aperture to each depth plane is a 2D linear convolution with

    G(x, y; z, f) = exp(-i 2 pi f r / c) / r,   r = sqrt(x^2 + y^2 + z^2)

evaluated with zero-padded FFTs. FDH phasors carry exp(+i 2 pi f t); the
negative sign in G undoes the forward flight time, which is what focuses.
The return leg from voxel to the single sensing point does not depend on
the aperture position and is applied per voxel after the convolution.
"""
from __future__ import annotations

import threading
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np
import scipy.fft as sfft

from .config import SPEED_OF_LIGHT, FrequencySet, VirtualGrid, VoxelGridSpec
from .errors import CapacityError, ContractError
from .fdh import FrequencyDomainHistogram


@dataclass
class ComplexVolume:
    data: np.ndarray  # (depths, rows, cols)
    frame_id: int
    depths_m: np.ndarray
    pitch_m: float = 0.0
    x0_m: float = 0.0
    y0_m: float = 0.0

    @property
    def shape(self):
        return self.data.shape

    def like(self, data, frame_id=None):
        return ComplexVolume(data, self.frame_id if frame_id is None else frame_id,
                             self.depths_m, self.pitch_m, self.x0_m, self.y0_m)

    def voxel_position(self, d, r, c):
        return np.array([self.x0_m + c * self.pitch_m, self.y0_m + r * self.pitch_m,
                         self.depths_m[d]])


def _offset_axis(n, p, pitch):
    """Signed lateral offsets for a padded axis of length p (unused slots NaN)."""
    m = np.arange(p, dtype=float)
    off = np.full(p, np.nan)
    off[:n] = m[:n]
    off[p - n + 1:] = m[p - n + 1:] - p
    return off * pitch


def propagator(dx, dy, z, f):
    r = np.sqrt(dx * dx + dy * dy + z * z)
    return np.exp(-2j * np.pi * (f / SPEED_OF_LIGHT) * r) / r


def sampled_kernel(n_rows, n_cols, pad_rows, pad_cols, pitch, z, f):
    """G on the padded grid in wrap-around order; zero where never used."""
    dy = _offset_axis(n_rows, pad_rows, pitch)[:, None]
    dx = _offset_axis(n_cols, pad_cols, pitch)[None, :]
    g = propagator(np.nan_to_num(dx), np.nan_to_num(dy), z, f)
    g[np.isnan(dy[:, 0]), :] = 0
    g[:, np.isnan(dx[0, :])] = 0
    return g


@dataclass
class RSDKernelSet:
    frequencies_hz: np.ndarray
    weights: np.ndarray
    depths_m: np.ndarray
    shape: tuple  # (rows, cols) of the aperture and of each depth plane
    pad_shape: tuple
    pitch_m: float
    x0_m: float
    y0_m: float
    sense_point: np.ndarray
    dtype: type = np.complex128
    kernels: Optional[np.ndarray] = None  # (D, K, Pr, Pc) spectra, None when lazy
    return_factor: Optional[np.ndarray] = None  # (D, K, rows, cols)
    _lazy_cache: dict = field(default_factory=dict, repr=False)

    @property
    def lazy(self):
        return self.kernels is None

    def plane(self, d):
        """(kernel spectra (K, Pr, Pc), return factor (K, rows, cols)) for plane d."""
        if not self.lazy:
            return self.kernels[d], self.return_factor[d]
        return _plane_kernels(self, d)


def _plane_kernels(ks: RSDKernelSet, d):
    z = ks.depths_m[d]
    rows, cols = ks.shape
    pr, pc = ks.pad_shape
    spectra = np.empty((len(ks.frequencies_hz), pr, pc), dtype=ks.dtype)
    for k, f in enumerate(ks.frequencies_hz):
        spectra[k] = sfft.fft2(sampled_kernel(rows, cols, pr, pc, ks.pitch_m, z, f))
    ys = ks.y0_m + ks.pitch_m * np.arange(rows)
    xs = ks.x0_m + ks.pitch_m * np.arange(cols)
    sx, sy, sz = ks.sense_point
    r_ret = np.sqrt((xs[None, :] - sx) ** 2 + (ys[:, None] - sy) ** 2 + (z - sz) ** 2)
    phase = -2j * np.pi * ks.frequencies_hz[:, None, None] / SPEED_OF_LIGHT * r_ret[None]
    factor = np.conj(ks.weights)[:, None, None] * np.exp(phase) / r_ret[None]
    return spectra, factor.astype(ks.dtype)


def kernel_memory_bytes(k, d, shape, pad_shape, dtype=np.complex128):
    item = np.dtype(dtype).itemsize
    return k * d * item * (pad_shape[0] * pad_shape[1] + shape[0] * shape[1])


def precompute_kernels(grid: VirtualGrid, volume: VoxelGridSpec, freqs: FrequencySet,
                       precision="double", memory_budget=2_000_000_000,
                       lazy=False) -> RSDKernelSet:
    """Build the per-(depth, frequency) convolution kernels.

    With ``lazy`` only one plane at a time is ever held; the values are the
    same either way.
    """
    if (volume.rows, volume.cols) != (grid.rows, grid.cols):
        raise ContractError(
            f"volume lateral grid {volume.rows}x{volume.cols} differs from the virtual "
            f"aperture {grid.rows}x{grid.cols}")
    dtype = np.complex64 if precision == "single" else np.complex128
    shape = (grid.rows, grid.cols)
    pad = (sfft.next_fast_len(2 * grid.rows - 1), sfft.next_fast_len(2 * grid.cols - 1))
    depths = volume.depths
    k = freqs.count
    need = kernel_memory_bytes(k, 1 if lazy else len(depths), shape, pad, dtype)
    if need > memory_budget:
        raise CapacityError("RSD kernel set exceeds the memory budget", need)
    ks = RSDKernelSet(np.asarray(freqs.frequencies_hz, float), np.asarray(freqs.weights, complex),
                      depths, shape, pad, grid.pitch_m, grid.x0_m, grid.y0_m,
                      np.asarray(grid.sense_point, float), dtype)
    if not lazy:
        spectra = np.empty((len(depths), k) + pad, dtype=dtype)
        factors = np.empty((len(depths), k) + shape, dtype=dtype)
        for d in range(len(depths)):
            spectra[d], factors[d] = _plane_kernels(ks, d)
        ks.kernels = spectra
        ks.return_factor = factors
    return ks


def reconstruct(fdh: FrequencyDomainHistogram, kernels: RSDKernelSet,
                freqs: Optional[FrequencySet] = None, workers=1,
                planes=None) -> ComplexVolume:
    """Propagate an FDH to every depth plane; returns the complex volume U.

    Planes are independent and may be spread over ``workers`` threads; the
    sum over frequencies runs in a fixed order, so output does not depend on
    the worker count.
    """
    data = fdh.data
    if data.ndim != 3 or data.shape[1:] != kernels.shape:
        raise ContractError(f"FDH grid {data.shape[1:]} does not match kernels {kernels.shape}")
    if data.shape[0] != len(kernels.frequencies_hz):
        raise ContractError("FDH frequency count does not match kernels")
    if freqs is not None and not np.array_equal(freqs.frequencies_hz, kernels.frequencies_hz):
        raise ContractError("frequency set differs from the one the kernels were built with")
    rows, cols = kernels.shape
    spectrum = sfft.fft2(data.astype(kernels.dtype, copy=False), s=kernels.pad_shape)
    planes = range(len(kernels.depths_m)) if planes is None else list(planes)
    out = np.zeros((len(kernels.depths_m), rows, cols), dtype=kernels.dtype)
    scratch = threading.local()

    def one(d):
        kern, factor = kernels.plane(d)
        work = getattr(scratch, "buf", None)
        if work is None:
            work = scratch.buf = np.empty(spectrum.shape, dtype=spectrum.dtype)
        np.multiply(spectrum, kern, out=work)
        # only the leading rows x cols block of each inverse transform is
        # kept, so transform along x first and drop the padded columns
        field_ = sfft.ifft(work, axis=-1, overwrite_x=True)
        field_ = np.ascontiguousarray(field_[..., :cols])
        field_ = sfft.ifft(field_, axis=-2, overwrite_x=True)[:, :rows]
        out[d] = np.einsum("kij,kij->ij", field_, factor)

    if workers > 1:
        with ThreadPoolExecutor(workers) as pool:
            list(pool.map(one, planes))
    else:
        for d in planes:
            one(d)
    return ComplexVolume(out, fdh.frame_id, kernels.depths_m, kernels.pitch_m,
                         kernels.x0_m, kernels.y0_m)


ORACLE_MAX_TERMS = 2e8


def backproject_oracle(fdh: FrequencyDomainHistogram, grid: VirtualGrid,
                       volume: VoxelGridSpec, freqs: FrequencySet,
                       max_terms=ORACLE_MAX_TERMS) -> ComplexVolume:
    """Direct-summation phasor backprojection, O(K * apertures * voxels)."""
    data = np.asarray(fdh.data, dtype=complex)
    k, rows, cols = data.shape
    if (rows, cols) != (grid.rows, grid.cols) or k != freqs.count:
        raise ContractError("FDH shape does not match grid/frequency set")
    depths = volume.depths
    vrows, vcols = volume.rows, volume.cols
    terms = float(k) * rows * cols * len(depths) * vrows * vcols
    if terms > max_terms:
        raise CapacityError(
            "backprojection oracle instance too large; shrink the grid, depth "
            "count or frequency count (or raise max_terms)", int(terms * 16))
    ap = grid.cell_positions().reshape(-1, 3)
    xs = grid.x0_m + grid.pitch_m * np.arange(vcols)
    ys = grid.y0_m + grid.pitch_m * np.arange(vrows)
    f = np.asarray(freqs.frequencies_hz, float)
    w = np.conj(np.asarray(freqs.weights, complex))
    flat = data.reshape(k, -1)
    sense = np.asarray(grid.sense_point, float)
    out = np.zeros((len(depths), vrows, vcols), dtype=complex)
    for d, z in enumerate(depths):
        vox = np.stack(np.broadcast_arrays(xs[None, :], ys[:, None], z), axis=-1).reshape(-1, 3)
        d1 = np.linalg.norm(vox[:, None, :] - ap[None, :, :], axis=-1)  # (V, P)
        d2 = np.linalg.norm(vox - sense, axis=-1)  # (V,)
        acc = np.zeros(len(vox), dtype=complex)
        for kk in range(k):
            phase = np.exp(-2j * np.pi * f[kk] / SPEED_OF_LIGHT * (d1 + d2[:, None]))
            acc += w[kk] * ((phase / (d1 * d2[:, None])) @ flat[kk])
        out[d] = acc.reshape(vrows, vcols)
    return ComplexVolume(out, fdh.frame_id, depths, grid.pitch_m, grid.x0_m, grid.y0_m)


def form_image(vol: ComplexVolume, gain=None):
    """Max-over-depth intensity image and the arg-max depth plane per pixel.

    ``gain`` (per depth plane) multiplies the intensity |U|^2 before the max.
    """
    if vol.data.size == 0:
        raise ContractError("empty volume")
    intensity = np.abs(vol.data) ** 2
    if gain is not None:
        intensity = intensity * np.asarray(gain, dtype=float)[:, None, None]
    depth_map = np.argmax(intensity, axis=0)
    image = np.take_along_axis(intensity, depth_map[None], axis=0)[0]
    return image, depth_map


# ---------------------------------------------------------------------------
# time-domain backprojection baseline

class TimeDomainBackprojector:
    """Classic (unfiltered) backprojection of photon arrival times.

    Each voxel sums, over the virtual aperture, the photon counts in the
    time bin matching its round-trip flight time. Index tables are built
    once per requested plane and reused across frames.
    """

    def __init__(self, grid: VirtualGrid, depths_m, time_bin_s, voxel_rows=None,
                 voxel_cols=None):
        self.grid = grid
        self.depths_m = np.asarray(depths_m, float)
        self.time_bin_s = time_bin_s
        self.voxel_rows = np.arange(grid.rows) if voxel_rows is None else np.asarray(voxel_rows)
        self.voxel_cols = np.arange(grid.cols) if voxel_cols is None else np.asarray(voxel_cols)
        ap = grid.cell_positions().reshape(-1, 3)
        xs = grid.x0_m + grid.pitch_m * self.voxel_cols
        ys = grid.y0_m + grid.pitch_m * self.voxel_rows
        self._index = []
        self.bins = 0
        for z in self.depths_m:
            vox = np.stack(np.broadcast_arrays(xs[None, :], ys[:, None], z), -1).reshape(-1, 3)
            d1 = np.linalg.norm(vox[:, None, :] - ap[None, :, :], axis=-1)
            d2 = np.linalg.norm(vox - grid.sense_point, axis=-1)
            tau = (d1 + d2[:, None]) / SPEED_OF_LIGHT
            idx = np.rint(tau / time_bin_s).astype(np.int64)
            self.bins = max(self.bins, int(idx.max()) + 1)
            self._index.append(idx)
        p = np.arange(ap.shape[0], dtype=np.int64)
        self._flat = [p[None, :] * self.bins + idx for idx in self._index]

    def __call__(self, events, frame_id=0):
        flat_cell = events.flat_index(self.grid.cols)
        tbin = np.rint(np.asarray(events.wall_time_s) / self.time_bin_s).astype(np.int64)
        ok = (tbin >= 0) & (tbin < self.bins)
        hist = np.bincount(flat_cell[ok] * self.bins + tbin[ok],
                           minlength=self.grid.cell_count * self.bins).astype(float)
        shape = (len(self.voxel_rows), len(self.voxel_cols))
        out = np.stack([hist[flat].sum(axis=1).reshape(shape) for flat in self._flat])
        return ComplexVolume(out.astype(complex), frame_id, self.depths_m, self.grid.pitch_m,
                             self.grid.x0_m + self.grid.pitch_m * self.voxel_cols[0],
                             self.grid.y0_m + self.grid.pitch_m * self.voxel_rows[0])


# ---------------------------------------------------------------------------
# files

def save_volume(path, vol: ComplexVolume):
    d, r, c = vol.data.shape
    header = np.array([d, r, c, vol.frame_id], dtype="<i8").tobytes()
    geom = np.concatenate([vol.depths_m, [vol.pitch_m, vol.x0_m, vol.y0_m]]).astype("<f8")
    with open(path, "wb") as fh:
        fh.write(b"NVOL")
        fh.write(header)
        fh.write(geom.tobytes())
        fh.write(np.ascontiguousarray(vol.data, "<c16").tobytes())


def load_volume(path) -> ComplexVolume:
    blob = Path(path).read_bytes()
    if blob[:4] != b"NVOL":
        raise ValueError(f"{path} is not a volume dump")
    d, r, c, frame_id = np.frombuffer(blob, "<i8", 4, 4)
    pos = 4 + 32
    geom = np.frombuffer(blob, "<f8", d + 3, pos)
    pos += 8 * (d + 3)
    data = np.frombuffer(blob, "<c16", d * r * c, pos).reshape(d, r, c).copy()
    return ComplexVolume(data, int(frame_id), geom[:d].copy(), *map(float, geom[d:]))


def write_pgm16(path, image, scale=None):
    """Binary 16-bit PGM. Values are divided by ``scale`` (default: the max)
    and mapped onto 0..65535; the scale is kept in a header comment."""
    image = np.asarray(image, dtype=float)
    if scale is None:
        scale = float(image.max()) if image.size and image.max() > 0 else 1.0
    q = np.clip(np.rint(image / scale * 65535), 0, 65535).astype(">u2")
    rows, cols = image.shape
    with open(path, "wb") as fh:
        fh.write(f"P5\n# scale {scale!r}\n{cols} {rows}\n65535\n".encode("ascii"))
        fh.write(q.tobytes())


def read_pgm16(path):
    """Return (uint16 image, scale)."""
    blob = Path(path).read_bytes()
    tokens, scale, pos = [], 1.0, 0
    while len(tokens) < 4:
        end = blob.index(b"\n", pos)
        line = blob[pos:end].decode("ascii")
        pos = end + 1
        if line.startswith("#"):
            parts = line[1:].split()
            if len(parts) == 2 and parts[0] == "scale":
                scale = float(parts[1])
            continue
        tokens.extend(line.split())
    if tokens[0] != "P5":
        raise ValueError(f"{path} is not a binary PGM")
    cols, rows, maxval = int(tokens[1]), int(tokens[2]), int(tokens[3])
    dtype = ">u2" if maxval > 255 else "u1"
    img = np.frombuffer(blob, dtype, rows * cols, pos).reshape(rows, cols)
    return img.astype(np.uint16), scale
