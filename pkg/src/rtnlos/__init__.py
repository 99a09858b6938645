"""Real-time non-line-of-sight video reconstruction from photon streams.

Photon records are parsed and remapped onto a dense virtual aperture,
binned straight into per-frequency phasor sums, propagated to depth planes
with FFT-based Rayleigh-Sommerfeld diffraction and averaged over more
frames the deeper a plane lies.
"""
from .config import (SPEED_OF_LIGHT, FrequencySet, NoiseParams, PhasorParams, PipelineTuning,
                     RelayGeometry, ScanPattern, SpadLayout, SystemConfig, VirtualGrid,
                     VoxelGridSpec, build_frequency_set, derive_virtual_grid, load_config,
                     save_config)
from .errors import CalibrationError, CapacityError, ConfigError, ContractError, StreamError

__version__ = "0.1.0"

__all__ = [
    "SPEED_OF_LIGHT", "FrequencySet", "NoiseParams", "PhasorParams", "PipelineTuning",
    "RelayGeometry", "ScanPattern", "SpadLayout", "SystemConfig", "VirtualGrid",
    "VoxelGridSpec", "build_frequency_set", "derive_virtual_grid", "load_config",
    "save_config", "CalibrationError", "CapacityError", "ConfigError", "ContractError",
    "StreamError",
]
