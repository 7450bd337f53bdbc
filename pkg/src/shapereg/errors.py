"""Exception types shared across the package."""


class ShapeRegError(Exception):
    """Base class for all shapereg errors."""


class DegenerateShape(ShapeRegError):
    """Point set is coincident or collinear; alignment is singular."""


class InsufficientData(ShapeRegError):
    """Too few samples to build a model."""


class ZeroVariance(InsufficientData):
    """Training shapes carry no variation; PCA has nothing to model."""


class SampleSizeOutOfRange(ShapeRegError):
    """Sample count outside the supported range of a statistical test."""


class DegenerateSample(ShapeRegError):
    """All sample values identical; test statistic undefined."""


class ShapeMismatch(ShapeRegError):
    """Array dimensions do not match the configured sizes."""


class AllSamplesSkipped(ShapeRegError):
    """Every unlabeled sample regulated to zero valid landmarks in an epoch."""


class NoConvergenceWarning(UserWarning):
    """Iterative alignment hit its iteration cap before the tolerance."""
