"""Exception hierarchy shared by the hydrolink modules."""


class HydrolinkError(Exception):
    """Base class for every error raised by hydrolink."""


class DomainError(HydrolinkError, ValueError):
    """A position or parameter lies outside its valid domain."""


class DegenerateGeometryError(HydrolinkError, ValueError):
    """Two points that must be distinct coincide."""


class GeometryError(HydrolinkError, ValueError):
    """A geometric construction has no valid solution."""


class OutOfBoundsError(HydrolinkError, ValueError):
    """A query point falls outside the pre-computed lattice."""


class CoverageError(OutOfBoundsError):
    """A scenario geometry leaves grid-map coverage at some sample."""

    def __init__(self, message, sample_index=None):
        super().__init__(message)
        self.sample_index = sample_index


class ConfigurationError(HydrolinkError, ValueError):
    """Invalid or inconsistent configuration."""

    def __init__(self, message, path=None):
        if path:
            message = f"{path}: {message}"
        super().__init__(message)
        self.path = path


class MissingArtifactError(HydrolinkError, FileNotFoundError):
    """An upstream artifact needed by a command does not exist."""


class CausalityError(HydrolinkError, ValueError):
    """A propagation delay is negative."""


class UndefinedReferenceError(HydrolinkError, ValueError):
    """A reference vector is identically zero."""


class NoDetectionError(HydrolinkError, RuntimeError):
    """No CIR tap rises above the detection floor."""


class SingularSystemError(HydrolinkError, ArithmeticError):
    """A normal-equation system is numerically singular."""


class CapacityError(HydrolinkError, ValueError):
    """Payload size does not match packet capacity."""


# grid-map persistence


class GridFileError(HydrolinkError, IOError):
    """Base class for grid-map file errors."""


class GridFormatError(GridFileError):
    """Wrong magic bytes or malformed header."""


class GridVersionError(GridFileError):
    """Unsupported format version."""


class GridTruncatedError(GridFileError):
    """File ends before the declared payload."""


class GridChecksumError(GridFileError):
    """Stored checksum does not match the payload."""
