"""Diffusions with a prescribed invariant measure: coefficient assembly,
structural checks, grid resolvents and tamed Euler-Maruyama simulation."""

from .coefficients import (CoefficientSet, MeasureDensity, antisymmetric_divfree, assemble_drift,
                           constructed_density_1d, dispersion, generator_apply, log_derivative,
                           measure_of, rho_from_drift_1d, symmetric_generator_apply)
from .errors import *  # noqa: F401,F403
from .fields import MatrixField, ScalarField, VectorField
from .report import ReportEntry, ValidationReport

__version__ = "0.1.0"
