"""Exception and warning types shared across the package."""


class NrsfmError(Exception):
    """Base class for all errors raised by this package."""


class MalformedInput(NrsfmError):
    """Track file violates the structural contract (row parity, raggedness, header)."""


class ParseError(NrsfmError):
    """A cell of a text track file could not be parsed as a number."""

    def __init__(self, row: int, col: int, message: str = ""):
        self.row = row
        self.col = col
        super().__init__(message or f"non-numeric cell at row {row}, column {col}")


class AlreadyCentered(NrsfmError):
    """Mean-centering was requested on a matrix that is already centered."""


class IllPosedWarning(UserWarning):
    """The requested basis count cannot be constrained by the given frame count."""


class RankTooLarge(NrsfmError):
    """Requested factorization rank exceeds the matrix dimensions."""


class NoSolutionSpace(NrsfmError):
    """The orthonormality constraint system has no usable near-null space."""


class InsufficientTriplets(NrsfmError):
    """Fewer distinct corrective triplets were found than requested.

    Carries the triplets that were found so callers may degrade gracefully.
    """

    def __init__(self, found: int, requested: int, triplets=None):
        self.found = found
        self.requested = requested
        self.triplets = triplets if triplets is not None else []
        super().__init__(f"found {found} distinct corrective triplets, need {requested}")


class NumericalFailure(NrsfmError):
    """An iterative solver produced a non-finite value."""


class DegenerateProjection(NrsfmError):
    """Rotation projection was attempted on a rank-deficient matrix."""


class DegenerateFrame(NrsfmError):
    """A frame's camera-row pair is too close to parallel to lift to a rotation."""

    def __init__(self, frame: int, message: str = ""):
        self.frame = frame
        super().__init__(message or f"degenerate row pair at frame {frame}")


class ShapeMismatch(NrsfmError):
    """Array dimensions do not match the expected frame/point layout."""


class NonFinite(NrsfmError):
    """An optimization iterate contains NaN or Inf (usually a scaling problem)."""


class DegenerateGroundTruth(NrsfmError):
    """A ground-truth frame has zero norm, so the normalized error is undefined."""

    def __init__(self, frame: int):
        self.frame = frame
        super().__init__(f"ground-truth frame {frame} has zero norm")


class DegenerateInput(NrsfmError):
    """An input matrix is identically zero where a normalization is required."""


class ConfigError(NrsfmError):
    """Invalid pipeline or experiment configuration."""


class StageError(NrsfmError):
    """A pipeline stage failed; names the stage and keeps the original error."""

    def __init__(self, stage: str, cause: BaseException):
        self.stage = stage
        self.cause = cause
        super().__init__(f"stage {stage!r}: {cause}")
