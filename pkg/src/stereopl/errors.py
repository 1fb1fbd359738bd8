"""Exception types shared across the package."""


class StereoPLError(Exception):
    """Base class for all errors raised by this package."""


class DepthTooSmall(StereoPLError):
    """Point depth is at or below the projection near-plane; caller must cull."""


class InvalidTarget(StereoPLError):
    """Grid target point count too small for the closed-form cell side."""


class VerticalLine(StereoPLError):
    """Segment is vertical within the guard; slope and intercept are undefined."""


class DegenerateEndpoints(StereoPLError):
    """Line endpoints coincide; no line can be fit through them."""


class SingularSystem(StereoPLError):
    """Damped normal equations not positive definite even at maximum damping."""


class NoOverlap(StereoPLError):
    """No trajectory timestamps could be associated within the tolerance."""


class DegenerateGeometry(StereoPLError):
    """Too few or collinear positions; alignment is not well defined."""


class FormatError(StereoPLError):
    """Malformed input file. Carries the path and 1-based line number."""

    def __init__(self, path, line_no, message):
        self.path = str(path)
        self.line_no = line_no
        super().__init__(f"{path}:{line_no}: {message}")


class ConfigError(StereoPLError):
    """Invalid run configuration (unknown key, bad type, or bad value)."""
