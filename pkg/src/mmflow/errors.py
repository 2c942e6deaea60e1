"""Exception types raised across the package.

The CLI maps these onto exit codes: configuration problems exit with 2,
bad or missing data with 3 and numeric failures with 4.
"""


class MflowError(Exception):
    """Base class for all package errors."""

    exit_code = 1


class ConfigError(MflowError, ValueError):
    exit_code = 2


class DataError(MflowError, ValueError):
    exit_code = 3


class NumericError(MflowError, ArithmeticError):
    exit_code = 4


# geometry
class AngleNearPi(NumericError):
    """Relative rotation too close to pi; the logarithm is multivalued."""


class DegenerateDirection(NumericError):
    """Anchor direction is parallel to the normal."""


class TooFewPoints(DataError):
    pass


# flows
class DimMismatch(DataError):
    pass


class TEndpoint(NumericError):
    """Time too close to 1 for the 1/(1-t) target field."""


class MaskAsData(DataError):
    """The mask state was supplied where a data state is required."""


class ZeroSupport(NumericError):
    """Current state has zero probability under the conditional path."""


# surface / networks
class EmptySurface(DataError):
    pass


class CoincidentPoints(NumericError):
    pass


class ShapeMismatch(DataError):
    pass


class EmptyBatch(DataError):
    pass


# metrics
class EmptySet(DataError):
    pass


class NonUnitNormal(DataError):
    pass


class LengthMismatch(DataError):
    pass


# files
class FormatError(DataError):
    pass


class CheckpointMismatch(DataError):
    pass
