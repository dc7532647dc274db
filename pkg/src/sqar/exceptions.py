"""Exception types shared across the package."""


class SqarError(Exception):
    """Base class for all package-specific errors."""


class SingularSystem(SqarError):
    """A spatial linear system is numerically rank deficient."""


class InvalidLambda(SqarError):
    """Spatial lag magnitude violates the |lambda| < 1 invertibility guard."""


class TooLarge(SqarError):
    """Problem exceeds the size bounds of the enumeration oracle."""


class MaxIterations(SqarError):
    """The linear program failed to converge within the solver's limits."""


class RankDeficient(SqarError):
    """A least-squares design matrix is numerically rank deficient."""


class InvalidBudget(SqarError):
    """Fusion budget outside the admissible range [0, t_max]."""


class ParseError(SqarError):
    """Malformed input file; message carries the row/column location."""


class DimensionMismatch(SqarError):
    """Weight matrix and dataset disagree on the number of observations."""


class DegenerateCovariance(UserWarning):
    """Bootstrap covariance of contrasts was singular; pseudo-inverse used."""
