"""Exception types raised across the package."""


class PrescribedSDEError(Exception):
    """Base class for all package errors."""


class SingularPoint(PrescribedSDEError):
    """Evaluation requested at a point declared singular."""


class NonFinite(PrescribedSDEError):
    """A field evaluation produced NaN or infinity."""


class NotSymmetric(PrescribedSDEError):
    pass


class NotPSD(PrescribedSDEError):
    """Matrix has an eigenvalue below the clipping tolerance."""


class NotAntisymmetric(PrescribedSDEError):
    pass


class NonPositiveDiffusion(PrescribedSDEError):
    pass


class QuadratureNonConvergent(PrescribedSDEError):
    """Doubling the node count moved an integral by more than allowed."""


class NonMonotoneStencil(PrescribedSDEError):
    """Cross-derivative terms would break the M-matrix sign pattern."""


class SolverDiverged(PrescribedSDEError):
    def __init__(self, message, iterations=None, residual=None):
        super().__init__(message)
        self.iterations = iterations
        self.residual = residual


class NotConverged(PrescribedSDEError):
    def __init__(self, message, profile=None):
        super().__init__(message)
        self.profile = profile


class UnknownScenario(PrescribedSDEError):
    pass


class ConfigParse(PrescribedSDEError):
    """Configuration text could not be parsed or validated.

    ``line`` and ``column`` are 1-based when known.
    """

    def __init__(self, message, line=None, column=None):
        where = ""
        if line is not None:
            where = f" (line {line}" + (f", column {column}" if column is not None else "") + ")"
        super().__init__(message + where)
        self.line = line
        self.column = column
