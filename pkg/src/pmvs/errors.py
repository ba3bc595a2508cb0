"""Exception hierarchy shared across the package."""


class PmvsError(Exception):
    """Base class for all package errors."""


class DegeneratePlane(PmvsError):
    """Viewing ray is (near-)parallel to the hypothesis plane."""


class BehindCamera(PmvsError):
    """A 3D point projects behind one of the cameras."""


class OutOfView(PmvsError):
    """A warped pixel falls outside the target image bounds."""


class InvalidNeighbor(PmvsError):
    """The source-view hypothesis at a warped pixel is masked invalid."""


class ImageTooSmall(PmvsError):
    """Image dimensions are below the pyramid minimum."""


class FormatError(PmvsError):
    """Malformed file: bad magic, version, dims or checksum."""

    def __init__(self, message, offset=None):
        super().__init__(message if offset is None else f"{message} (offset {offset})")
        self.offset = offset


class SupportUnavailable(PmvsError):
    """Every supporting pixel warped outside the source view."""


class ConfigError(PmvsError):
    """Invalid configuration value."""


class PlanError(PmvsError):
    """Stage plan is cyclic or has unresolvable dependencies."""


class StageIOError(PmvsError):
    """A stage dependency file is missing or corrupt."""


class LedgerMismatch(PmvsError):
    """Resume ledger does not match the active scene configuration."""


class FusionInputError(PmvsError):
    """Fusion inputs disagree on resolution."""


class SceneError(PmvsError):
    """Degenerate synthetic scene (e.g. camera inside geometry)."""
