"""Exception hierarchy shared across the package."""


class UTFlawError(Exception):
    """Base class for all package errors."""


class ConfigError(UTFlawError, ValueError):
    """Invalid configuration or parameters."""


class ScanFormatError(UTFlawError):
    """A `.utb` stream does not follow the binary layout."""


class HeaderError(ScanFormatError, ValueError):
    """A header field violates its invariant.

    ``field`` names the offending header field so each single-field
    violation is distinguishable.
    """

    def __init__(self, field, message):
        super().__init__(f"{field}: {message}")
        self.field = field


class TruncatedScanError(ScanFormatError):
    def __init__(self, expected, received, rows_completed):
        super().__init__(
            f"truncated payload: expected {expected} bytes, received {received} "
            f"({rows_completed} full rows delivered)"
        )
        self.expected = expected
        self.received = received
        self.rows_completed = rows_completed


class ScanIOError(UTFlawError, OSError):
    def __init__(self, bytes_written, cause):
        super().__init__(f"write failed after {bytes_written} bytes: {cause}")
        self.bytes_written = bytes_written


class SidecarParseError(UTFlawError, ValueError):
    def __init__(self, line_number, message):
        super().__init__(f"line {line_number}: {message}")
        self.line_number = line_number


class MeasurementError(UTFlawError, ValueError):
    """A depth measurement was requested from an invalid peak or position."""


class ShapeError(UTFlawError, ValueError):
    pass


class DivergenceError(UTFlawError, ArithmeticError):
    def __init__(self, layer, step, value):
        super().__init__(f"non-finite value {value!r} at layer {layer!r}, step {step}")
        self.layer = layer
        self.step = step


class IncompatibleInputError(UTFlawError, ValueError):
    """Inputs are individually valid but cannot be combined (e.g. pitch mismatch)."""


class DatasetShortfallError(UTFlawError, ValueError):
    def __init__(self, category, needed, available):
        super().__init__(
            f"not enough {category} candidates: need {needed}, have {available} "
            f"(short by {needed - available})"
        )
        self.category = category
        self.needed = needed
        self.available = available

