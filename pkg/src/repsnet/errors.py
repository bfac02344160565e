"""Exception types shared across the package."""


class RepsNetError(Exception):
    """Base class for contract violations raised by this package."""


class DimensionError(RepsNetError, ValueError):
    """Operand shapes are incompatible."""


class ContractError(RepsNetError, ValueError):
    """A precondition of an operation does not hold."""


class NumericError(RepsNetError, FloatingPointError):
    """A forward op produced NaN or Inf from finite inputs."""
