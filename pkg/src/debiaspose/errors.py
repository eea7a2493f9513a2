"""Exception hierarchy shared across the package."""


class PoseError(ValueError):
    """Base class for recoverable pose-processing failures."""


class DegenerateProjection(PoseError):
    """A point lies on (or numerically at) a camera's principal plane."""


class MissingPelvis(PoseError):
    pass


class DegenerateSpine(PoseError):
    pass


class DegenerateGeometry(PoseError):
    """Observation rays do not determine a unique 3D point."""


class NonFinite(PoseError):
    pass


class DimensionMismatch(ValueError):
    pass


class EmptyDataset(ValueError):
    pass


class NoPrediction(PoseError):
    """Bias prediction could not be formed for a camera view."""


class NoComparablePairs(ValueError):
    pass


class SkeletonMismatch(ValueError):
    """A checkpoint was trained for a different joint layout."""
