"""Error types shared by every module.

Each error carries a stable ``code`` and the exit status the CLI maps it to.
"""


class AuditError(Exception):
    code = "audit_error"
    exit_status = 1


class ValidationError(AuditError, ValueError):
    """A violated invariant, a malformed file, or a bad command-line value."""

    code = "validation_error"
    exit_status = 2


class DataFileError(AuditError):
    """A file that cannot be found, read, or written."""

    code = "io_error"
    exit_status = 3


class NumericalError(AuditError, ArithmeticError):
    """Non-finite values, e.g. a diverging training run."""

    code = "numerical_error"
    exit_status = 4

    def __init__(self, message: str, iteration: int | None = None):
        super().__init__(message)
        self.iteration = iteration
