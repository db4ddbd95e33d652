"""Exception hierarchy shared by every lsrkit module."""


class LsrError(Exception):
    """Base class for all toolkit errors."""


class DimensionError(LsrError, ValueError):
    pass


class NumericalError(LsrError, ArithmeticError):
    pass


class SingularSystemError(NumericalError):
    def __init__(self, index, message=None):
        self.index = index
        super().__init__(message or f"triangular factor is singular at diagonal index {index}")


class RankDeficiencyError(NumericalError):
    pass


class UnsupportedActivationError(LsrError, ValueError):
    pass


class SolverBreakdown(NumericalError):
    def __init__(self, iteration, message=None):
        self.iteration = iteration
        super().__init__(message or f"solver breakdown at iteration {iteration}")


class ConfigError(LsrError, ValueError):
    pass


class FileFormatError(LsrError, ValueError):
    """A checkpoint or vector file that does not follow its format."""
