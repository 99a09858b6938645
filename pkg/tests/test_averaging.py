import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from rtnlos.averaging import (FrameRing, GainCurve, depth_average, estimate_gain,
                              frames_for_depth, fwhm_1d, peak_intensity, psf_eval,
                              region_mean_intensity, ring_capacity, snr_eval, write_psf_csv,
                              write_snr_csv)
from rtnlos.config import PhasorParams, VoxelGridSpec, build_frequency_set, derive_virtual_grid
from rtnlos.errors import CalibrationError, ContractError
from rtnlos.experiments import patch_region, patch_scene, psf_sweep
from rtnlos.fdh import FrequencyDomainHistogram, apply_cell_weights
from rtnlos.rsd import ComplexVolume, form_image, precompute_kernels, reconstruct
from rtnlos.simulator import expected_fdh

from conftest import small_config


def vol(data, depths=None):
    data = np.asarray(data, complex)
    depths = np.arange(1, data.shape[0] + 1, dtype=float) if depths is None else depths
    return ComplexVolume(data, 0, np.asarray(depths, float), 0.01)


# --- frame counts -------------------------------------------------------------------

@pytest.mark.parametrize("z,n", [(0.3, 1), (1.0, 1), (1.01, 2), (2.0, 2), (2.5, 3), (3.0, 3),
                                 (3.5, 4), (1.0 + 0.02 * 100, 3)])
def test_frames_for_depth(z, n):
    assert frames_for_depth(z) == n


def test_frames_for_depth_scale_and_ring_size():
    assert frames_for_depth(1.5, 2.0) == 3
    np.testing.assert_array_equal(frames_for_depth([1.0, 2.0, 3.0]), [1, 2, 3])
    assert ring_capacity(3.5) == 4


# --- depth averaging ------------------------------------------------------------------

def test_identical_frames_average_to_themselves(rng):
    v = vol(rng.normal(size=(4, 3, 3)) + 1j * rng.normal(size=(4, 3, 3)))
    ring = FrameRing(4)
    for _ in range(4):
        ring.push(v)
    np.testing.assert_allclose(depth_average(ring).data, v.data, rtol=1e-15)


def test_plane_uses_newest_frames_only():
    ring = FrameRing(3)
    for value in (1.0, 2.0, 3.0, 4.0):  # 1.0 falls out of the ring
        ring.push(vol(np.full((3, 1, 1), value)))
    out = depth_average(ring).data[:, 0, 0].real
    np.testing.assert_allclose(out, [4.0, 3.5, 3.0])


def test_partial_ring_clamps_frame_count():
    ring = FrameRing(3)
    ring.push(vol(np.full((3, 1, 1), 2.0)))
    ring.push(vol(np.full((3, 1, 1), 4.0)))
    np.testing.assert_allclose(depth_average(ring).data[:, 0, 0].real, [4.0, 3.0, 3.0])


def test_ring_errors():
    with pytest.raises(ContractError):
        depth_average(FrameRing(2))
    ring = FrameRing(2)
    ring.push(vol(np.zeros((2, 2, 2))))
    with pytest.raises(ContractError):
        ring.push(vol(np.zeros((2, 3, 2))))
    with pytest.raises(ValueError):
        FrameRing(0)


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 2 ** 32 - 1), st.integers(1, 5))
def test_coherent_never_exceeds_incoherent(seed, frames):
    rng = np.random.default_rng(seed)
    depths = [1.0, 2.0, 3.0, 4.0, 5.0]
    ring = FrameRing(5)
    stack = []
    for _ in range(frames):
        v = vol(rng.normal(size=(5, 2, 3)) + 1j * rng.normal(size=(5, 2, 3)), depths)
        ring.push(v)
        stack.insert(0, v.data)
    coherent = np.abs(depth_average(ring).data) ** 2
    for d, z in enumerate(depths):
        n = min(frames_for_depth(z), frames)
        incoherent = np.mean([np.abs(s[d]) ** 2 for s in stack[:n]], axis=0)
        assert np.all(coherent[d] <= incoherent + 1e-12)


@settings(max_examples=20, deadline=None)
@given(st.integers(0, 2 ** 32 - 1), st.floats(-3, 3), st.floats(-3, 3))
def test_averaging_is_linear(seed, a, b):
    rng = np.random.default_rng(seed)
    r1, r2, r12 = FrameRing(3), FrameRing(3), FrameRing(3)
    for _ in range(3):
        x = rng.normal(size=(3, 2, 2)) + 0j
        y = rng.normal(size=(3, 2, 2)) + 0j
        r1.push(vol(x))
        r2.push(vol(y))
        r12.push(vol(a * x + b * y))
    lhs = depth_average(r12).data
    rhs = a * depth_average(r1).data + b * depth_average(r2).data
    np.testing.assert_allclose(lhs, rhs, atol=1e-12)


# --- gain ------------------------------------------------------------------------------

def test_flat_gain_is_identity():
    np.testing.assert_array_equal(GainCurve.flat().at([0.5, 1.0, 7.0]), 1.0)


def test_gain_examples():
    g = estimate_gain([1.0, 2.0, 3.0], [1.0, 0.5, 0.25])
    np.testing.assert_allclose(g.at([1.0, 2.0, 3.0]), [1.0, 2.0, 4.0])
    assert g.at(1.5) == pytest.approx(math.sqrt(2))  # log-linear between entries
    assert g.at(0.2) == 1.0 and g.at(9.0) == 4.0  # held beyond the table
    g2 = estimate_gain([1.0, 2.0], [4.0, 1.0], reference_depth_m=2.0)
    np.testing.assert_allclose(g2.at([1.0, 2.0]), [0.25, 1.0])


def test_gain_calibration_errors(tmp_path):
    with pytest.raises(CalibrationError, match=r"\[2.0\]"):
        estimate_gain([1.0, 2.0], [1.0, 0.0])
    with pytest.raises(CalibrationError):
        estimate_gain([1.0], [1.0])
    (tmp_path / "g.txt").write_text("# depth_m gain\n1.0 2.0 3.0\n")
    with pytest.raises(CalibrationError):
        GainCurve.load(tmp_path / "g.txt")


def test_gain_file_round_trip(tmp_path):
    g = estimate_gain([1.0, 1.5, 3.0], [2.0, 1.1, 0.3])
    g.save(tmp_path / "gain.txt")
    back = GainCurve.load(tmp_path / "gain.txt")
    np.testing.assert_allclose(back.at([1.0, 2.2, 3.0]), g.at([1.0, 2.2, 3.0]), rtol=1e-8)


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2 ** 32 - 1))
def test_gain_keeps_in_plane_argmax(seed):
    rng = np.random.default_rng(seed)
    v = vol(rng.normal(size=(4, 5, 5)) + 1j * rng.normal(size=(4, 5, 5)))
    g = estimate_gain([1.0, 4.0], [1.0, 0.1])
    intensity = np.abs(v.data) ** 2
    scaled = intensity * g.at(v.depths_m)[:, None, None]
    for d in range(4):
        assert np.argmax(scaled[d]) == np.argmax(intensity[d])
    image, _ = form_image(v, g.at(v.depths_m))
    np.testing.assert_allclose(image, scaled.max(axis=0))


@pytest.fixture(scope="module")
def patch_sweep():
    """Noise-free region means of a 1.5 m patch, calibration depths and held-out depths."""
    cfg = small_config(32, z=(1.0, 3.0, 0.25), span=40e-9)
    grid = derive_virtual_grid(cfg.scan, cfg.spads, cfg.relay)
    freqs = build_frequency_set(cfg.phasor)
    region = patch_region(cfg, grid, 1.5)
    weights = grid.cell_weights()
    means = {}
    for z in cfg.volume.depths:
        spec = VoxelGridSpec(z, z + 0.1, 0.1, grid.rows, grid.cols)
        data = expected_fdh(patch_scene(z, 1.5, 400.0), cfg, grid, freqs)
        fdh = apply_cell_weights(FrequencyDomainHistogram(data, 0, 0), weights)
        ks = precompute_kernels(grid, spec, freqs, lazy=True)
        means[float(z)] = region_mean_intensity(reconstruct(fdh, ks, planes=[0]), z, region)
    return means


def test_gain_flattens_patch_intensity(patch_sweep):
    calib = [z for z in patch_sweep if round(z * 2) == z * 2]  # 1.0, 1.5, ... 3.0
    held_out = [z for z in patch_sweep if z not in calib]
    g = estimate_gain(calib, [patch_sweep[z] for z in calib])
    ref = patch_sweep[1.0]
    for z in held_out:
        assert patch_sweep[z] * g.at(z) == pytest.approx(ref, rel=0.2)
    # without the gain the far patch is far dimmer
    assert patch_sweep[3.0] < 0.2 * ref


# --- SNR ---------------------------------------------------------------------------------

def test_snr_examples(caplog):
    rows = snr_eval({1.0: [1.0, 3.0], 2.0: [5.0, 5.0, 5.0]})
    assert rows[0].snr == pytest.approx(2.0 / math.sqrt(2.0))
    assert rows[1].infinite and math.isinf(rows[1].snr)
    assert rows[0].normalized == pytest.approx(1.0)
    assert "only 2 repetitions" in caplog.text
    with pytest.raises(ContractError):
        snr_eval({1.0: [1.0]})


def test_snr_normalization_uses_reference_depth(tmp_path):
    rows = snr_eval({1.0: [9.0, 11.0] * 5, 2.0: [4.0, 6.0] * 5})
    assert rows[1].normalized == pytest.approx(0.5)
    write_snr_csv(tmp_path / "s.csv", {"rsd": rows})
    lines = (tmp_path / "s.csv").read_text().splitlines()
    assert lines[0].startswith("method,depth_m,snr,normalized_snr") and len(lines) == 3


def test_region_and_peak_intensity():
    data = np.zeros((2, 4, 4), complex)
    data[1, 1:3, 1:3] = 2.0
    data[1, 0, 0] = 10.0
    v = vol(data, [1.0, 2.0])
    assert region_mean_intensity(v, 2.0, (1, 3, 1, 3)) == 4.0
    assert region_mean_intensity(v, 2.0, (1, 3, 1, 3), GainCurve.flat()) == 4.0
    assert peak_intensity(v, 2.0) == 100.0
    assert peak_intensity(v, 2.0, (1, 3, 1, 3)) == 4.0
    with pytest.raises(ContractError):
        region_mean_intensity(v, 2.0, (2, 2, 0, 4))


# --- PSF ----------------------------------------------------------------------------------

@pytest.mark.parametrize("sigma", [2.0, 3.7, 6.0])
def test_gaussian_fwhm(sigma):
    x = np.arange(101)
    width, truncated = fwhm_1d(np.exp(-0.5 * ((x - 50.3) / sigma) ** 2))
    assert abs(width - 2 * math.sqrt(2 * math.log(2)) * sigma) <= 1.0
    assert not truncated


def test_truncated_profile_flagged():
    width, truncated = fwhm_1d(np.array([1.0, 0.9, 0.8, 0.2]))
    assert truncated and width == pytest.approx(2 + 0.3 / 0.6)


def test_psf_eval_of_separable_gaussian(tmp_path):
    z = np.linspace(1.0, 2.0, 51)
    y = np.arange(21)
    x = np.arange(31)
    field = np.exp(-((z[:, None, None] - 1.5) ** 2) / (2 * 0.05 ** 2)
                   - (y[None, :, None] - 10) ** 2 / (2 * 2.0 ** 2)
                   - (x[None, None, :] - 15) ** 2 / (2 * 3.0 ** 2))
    v = ComplexVolume(np.sqrt(field) + 0j, 0, z, 0.01)
    row = psf_eval(v, 1.5)
    assert row.lateral_fwhm_m == pytest.approx(2.3548 * 0.03, abs=0.01)
    assert row.axial_fwhm_m == pytest.approx(2.3548 * 0.05, abs=0.02)
    assert row.peak_depth_m == pytest.approx(1.5) and not row.truncated
    write_psf_csv(tmp_path / "p.csv", [row], {"wavelength_m": [0.08]})
    assert (tmp_path / "p.csv").read_text().startswith("wavelength_m,depth_m")


def test_axial_width_grows_with_wavelength():
    widths = []
    for lam in (0.04, 0.08, 0.16):
        cfg = small_config(32, z=(1.0, 2.0, 0.02), span=40e-9)
        cfg = cfg.replace(phasor=PhasorParams(virtual_wavelength_m=lam, spectral_cutoff=0.5,
                                              histogram_span_s=40e-9))
        (row,) = psf_sweep(cfg, [1.5])
        widths.append(row.axial_fwhm_m)
    assert widths[0] < widths[1] < widths[2]
