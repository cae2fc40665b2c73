"""Exception types shared across the package."""


class DikmeansError(Exception):
    """Base class for every error the library raises on purpose."""


class DimensionMismatch(DikmeansError):
    """Shapes or landmark counts of the operands do not agree."""


class SingularSystem(DikmeansError):
    """The landmark placement makes the spline system numerically singular."""


class InsufficientData(DikmeansError):
    """Fewer samples than clusters."""


class LabelOutOfRange(DikmeansError):
    """A label or assignment index falls outside [0, K)."""


class EmptyInput(DikmeansError):
    """An operation that needs at least one element received none."""


class BadMagic(DikmeansError):
    """A binary file does not start with the expected magic number."""


class TruncatedFile(DikmeansError):
    """A binary file ended before its declared payload."""


class CountMismatch(DikmeansError):
    """Image and label containers disagree on the number of records."""


class UnreadableImage(DikmeansError):
    """An image file exists but cannot be decoded."""


class EmptyClass(DikmeansError):
    """A class directory contains no images."""


class BadCheckpoint(DikmeansError):
    """A checkpoint file is corrupt or has an unsupported version."""
