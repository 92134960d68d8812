"""Exception hierarchy shared across the package."""


class AlflbError(Exception):
    """Base class for all package errors."""


class InvalidRange(AlflbError):
    """A dimension or parameter is outside its allowed range."""


class NonDivisible(AlflbError):
    """K*T is not divisible by E in balanced-target mode."""


class DimMismatch(AlflbError):
    """Shapes of matrices / vectors are inconsistent."""


class OverflowGuard(AlflbError):
    """Softmax produced a degenerate (0 or 1) probability."""


class KNotOne(AlflbError):
    """Operation is only defined for the K=1 analysis mode."""


class DegenerateGaps(AlflbError):
    """Two tokens share an identical score gap; the u-bar threshold is 0."""


class TooLarge(AlflbError):
    """Instance too large for exhaustive enumeration."""


class TooManyTerms(AlflbError):
    """Subset enumeration in the quadrature would exceed the term budget."""


class NoConvergence(AlflbError):
    """Iterative solver exhausted its budget without meeting tolerance."""


class ConfigError(AlflbError):
    """Base class for experiment-configuration problems."""


class ParseError(ConfigError):
    """Config file could not be parsed."""


class ValidationError(ConfigError):
    """Config parsed but a field is missing, unknown, or invalid."""

    def __init__(self, field: str, message: str = ""):
        self.field = field
        super().__init__(f"{field}: {message}" if message else field)


class IoError(AlflbError):
    """Filesystem problem while writing experiment artifacts."""
