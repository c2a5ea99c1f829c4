"""Exception types shared by the library and the command line.

Each error carries a short machine-readable ``code`` and the process exit
status the CLI maps it to.
"""


class GateCascadeError(Exception):
    code = "error"
    exit_status = 1


class UsageError(GateCascadeError, ValueError):
    code = "usage"
    exit_status = 2


class DataError(GateCascadeError, ValueError):
    """Malformed or inconsistent input data (files, shapes, labels)."""

    code = "data"
    exit_status = 3


class InfeasibleError(GateCascadeError):
    """No threshold setting reaches the requested accuracy floor."""

    code = "infeasible"
    exit_status = 4

    def __init__(self, message, ceiling=None):
        super().__init__(message)
        self.ceiling = ceiling


class NumericalError(GateCascadeError, ArithmeticError):
    """Training diverged (non-finite loss)."""

    code = "numerical"
    exit_status = 5
