"""Exception hierarchy shared by every vsdl module.

The CLI maps these onto exit codes: numeric failures exit 2, everything
else derived from :class:`VsdlError` exits 1.
"""


class VsdlError(Exception):
    """Base class for all package errors."""


class ConfigError(VsdlError, ValueError):
    """Inconsistent configuration (layer geometry, split ratios, phantom bounds)."""


class DimensionError(VsdlError, ValueError):
    """Operand shapes do not agree."""


class InputError(VsdlError, ValueError):
    """Malformed or out-of-range input data."""


class RangeError(InputError):
    """A requested slice range runs past the end of a volume."""


class NumericError(VsdlError, ArithmeticError):
    """Non-finite values appeared during training or evaluation."""


class ContractError(VsdlError, RuntimeError):
    """An API precondition was violated (e.g. backward on a non-scalar)."""


class WeightFileError(VsdlError):
    """Base class for weight-file format problems."""


class BadMagicError(WeightFileError):
    pass


class VersionError(WeightFileError):
    pass


class TruncatedFileError(WeightFileError):
    pass


class TrailingBytesError(WeightFileError):
    pass


class NameMismatchError(WeightFileError):
    pass


class ShapeMismatchError(WeightFileError):
    pass
