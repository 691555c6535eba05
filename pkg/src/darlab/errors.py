class DarlabError(Exception):
    """Base class for library errors."""


class ContractError(DarlabError, ValueError):
    """A precondition of an operation was violated."""


class DimensionError(ContractError):
    """Operand shapes are incompatible."""


class NumericError(DarlabError, FloatingPointError):
    """Non-finite values where finite ones are required."""


class ConfigMismatch(ContractError):
    """A checkpoint was loaded under a different model or router config."""


class VerificationError(DarlabError, AssertionError):
    """A numerical verification failed."""
