"""Exception types shared across the package."""


class NoduleDetError(Exception):
    """Base class for all errors raised by this package."""


class ShapeError(NoduleDetError, ValueError):
    """Operand extents are incompatible with the requested operation."""


class GraphError(NoduleDetError, RuntimeError):
    """A backward pass was requested on something outside a differentiation graph."""


class TrainingDivergedError(NoduleDetError, FloatingPointError):
    """A training loss became NaN or infinite."""


class FormatError(NoduleDetError, ValueError):
    """Malformed input file."""


class MissingKeyError(FormatError):
    pass


class UnsupportedElementTypeError(FormatError):
    pass


class PayloadSizeError(FormatError):
    pass


class CsvHeaderError(FormatError):
    pass


class CsvFieldError(FormatError):
    pass


class PhantomPackingError(NoduleDetError, RuntimeError):
    """Could not place the requested objects without overlap."""


class UnknownScanError(NoduleDetError, KeyError):
    def __str__(self):
        return str(self.args[0]) if self.args else ""
