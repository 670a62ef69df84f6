"""Exception hierarchy shared across the toolkit."""


class Aop3dError(Exception):
    """Base class for all domain errors raised by this package."""


class VolumeFormatError(Aop3dError):
    """File is not a valid volume container (bad magic, broken header, ...)."""


class TruncationError(VolumeFormatError):
    """Payload is shorter than the header promises."""


class UnsupportedTiffError(Aop3dError):
    """TIFF file uses a feature outside the supported baseline subset."""


class ShapeMismatchError(Aop3dError):
    """Two volumes that must share a shape do not."""


class ParameterError(Aop3dError, ValueError):
    """A parameter is outside its documented range."""


class PlacementError(Aop3dError):
    """Synthetic instance placement failed within the retry budget."""


class NumericError(Aop3dError):
    """A numerical routine could not produce a trustworthy result."""


class BenchmarkError(Aop3dError):
    """A benchmark manifest is inconsistent or references missing data."""
