"""Exception hierarchy shared across the package."""


class ChronodeError(Exception):
    """Base class for every error raised by chronode."""


class DimensionError(ChronodeError, ValueError):
    """Operand shapes are incompatible."""


class ContractError(ChronodeError, ValueError):
    """A documented precondition was violated."""


class SolverError(ChronodeError, RuntimeError):
    pass


class StepLimitError(SolverError):
    pass


class StiffnessError(SolverError):
    pass


class DataError(ChronodeError, ValueError):
    pass


class ParseError(DataError):
    pass


class DivergenceError(ChronodeError, FloatingPointError):
    """Training produced a non-finite loss."""

    def __init__(self, message, iteration=None):
        super().__init__(message)
        self.iteration = iteration


class ConfigError(ChronodeError, ValueError):
    pass
