"""Exception types raised across the package."""


class CagevoxError(Exception):
    """Base class for all package-specific errors."""


class DegenerateTet(CagevoxError):
    """A tetrahedron has (near-)zero volume where a valid one is required."""


class InconsistentOrientation(CagevoxError):
    """A tetrahedron has non-positive signed volume in the rest state."""


class NonManifold(CagevoxError):
    """A triangle face is incident to more than two tetrahedra."""


class InconsistentTraversal(CagevoxError):
    """Face adjacency along a ray contradicts the depth order.

    This signals a self-intersecting deformed state; it is surfaced to the
    caller rather than silently repaired.
    """


class UnknownRegion(CagevoxError):
    """A region id does not name a tetrahedron or a registered region."""


class NotATetSegment(CagevoxError):
    """Segment-endpoint interpolation was requested on a non-tet segment."""


class DimensionMismatch(CagevoxError):
    """Rig, parameter, or grid dimensions disagree."""


class EmptySurface(CagevoxError):
    """Weight transfer was requested from a surface with no vertices."""


class NonFiniteLoss(CagevoxError):
    """The training loss became NaN or infinite."""

    def __init__(self, iteration: int, value: float):
        super().__init__(f"non-finite loss {value!r} at iteration {iteration}")
        self.iteration = iteration
        self.value = value


class FormatError(CagevoxError):
    """A file does not conform to its declared format."""


class ConfigError(CagevoxError):
    """A scene configuration or manifest is invalid or inconsistent."""
