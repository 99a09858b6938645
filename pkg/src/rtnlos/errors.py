"""Exception types. Each maps onto a CLI exit code."""


class ConfigError(ValueError):
    """Invalid or inconsistent configuration (exit code 2)."""

    exit_code = 2


class StreamError(ValueError):
    """Malformed photon stream (exit code 3)."""

    exit_code = 3

    def __init__(self, message, offset=None):
        if offset is not None:
            message = f"{message} (byte offset {offset})"
        super().__init__(message)
        self.offset = offset


class CapacityError(MemoryError):
    """A precomputation would exceed the configured memory budget (exit code 4)."""

    exit_code = 4

    def __init__(self, message, required_bytes):
        super().__init__(f"{message}: requires {required_bytes} bytes")
        self.required_bytes = required_bytes


class ContractError(ValueError):
    """Arguments violate an operation's preconditions (shape mismatch etc)."""


class CalibrationError(ValueError):
    """Gain calibration cannot be computed from the given data."""
