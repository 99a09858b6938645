import numpy as np
import pytest

from rtnlos.config import PhasorParams, SystemConfig, derive_virtual_grid
from rtnlos.experiments import reduced_config


def small_config(size=16, z=(1.0, 1.6, 0.1), cutoff=0.5, span=16e-9, **sections):
    """A ``size`` x ``size`` aperture with a handful of frequencies and depth planes."""
    base = SystemConfig(phasor=PhasorParams(spectral_cutoff=cutoff, histogram_span_s=span))
    cfg = reduced_config(size, base, z_min_m=z[0], z_max_m=z[1], depth_spacing_m=z[2])
    return cfg.replace(**sections) if sections else cfg


@pytest.fixture
def cfg16():
    return small_config(16)


@pytest.fixture
def grid16(cfg16):
    return derive_virtual_grid(cfg16.scan, cfg16.spads, cfg16.relay)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


# one line per acceptance criterion, printed after the run whatever the
# capture mode
ACCEPTANCE = {}


def record(number, ok, detail):
    ACCEPTANCE[number] = (bool(ok), detail)
    return ok


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(ACCEPTANCE):
        ok, detail = ACCEPTANCE[n]
        terminalreporter.write_line(f"criterion {n:2d}: {'PASS' if ok else 'FAIL'}  {detail}")
