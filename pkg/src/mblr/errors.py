"""Exception hierarchy.

Each error class carries a short machine-readable ``kind`` used by the CLI
to pick an exit code.
"""


class MBLRError(Exception):
    kind = "error"
    exit_code = 1


class ParseError(MBLRError):
    """Bad input file, bad configuration or an unknown category label."""

    kind = "parse"
    exit_code = 3


class EstimabilityError(MBLRError):
    """The reduced Hessian is not positive definite, or the data cannot identify the model."""

    kind = "estimability"
    exit_code = 4


class ConvergenceError(MBLRError):
    kind = "convergence"
    exit_code = 5

    def __init__(self, message, last=None):
        super().__init__(message)
        self.last = last


class SurfaceDegeneracyError(MBLRError):
    """Fitted quadratic response surface has no interior maximum."""

    kind = "surface-degeneracy"
    exit_code = 6
