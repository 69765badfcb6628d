"""Coefficient bundle (rho, psi, A, B) and the objects derived from it.

With ``mu_hat = psi * rho dx`` the drift is ``G = beta + B`` where

    beta = (1 / (2 psi)) div A + (1 / (2 psi rho)) A grad(rho)

is the logarithmic derivative of rho with respect to A and psi, and B is
divergence free with respect to mu_hat. The diffusion matrix is
``A_hat = A / psi`` and the dispersion is ``sigma_hat = psi^{-1/2} sqrt(A)``.
"""
from __future__ import annotations

import threading
from dataclasses import dataclass, field, replace

import numpy as np

from .errors import NonFinite, NonPositiveDiffusion, NotAntisymmetric, NotPSD, NotSymmetric, SingularPoint
from .fields import (
    MatrixField,
    ScalarField,
    VectorField,
    as_points,
    merge_singular_points,
)

PSI_FLOOR = 1e-12
EIG_CLIP = 1e-10
ANTISYM_TOL = 1e-12
DIRECTIONS = ("forward", "dual")


class FloorCounter:
    """Thread-safe tally of evaluations where the psi floor was active."""

    def __init__(self):
        self._lock = threading.Lock()
        self._count = 0

    def add(self, n):
        if n:
            with self._lock:
                self._count += int(n)

    @property
    def value(self):
        with self._lock:
            return self._count

    def reset(self):
        with self._lock:
            self._count = 0


def _check_direction(direction):
    if direction not in DIRECTIONS:
        raise ValueError(f"direction must be one of {DIRECTIONS}, got {direction!r}")


@dataclass(frozen=True, eq=False)
class CoefficientSet:
    """Validated bundle of the data defining the generator.

    Attributes
    ----------
    rho : ScalarField
        Positive density (a.e.) of the reference measure ``mu = rho dx``.
    psi : ScalarField
        Positive weight with locally bounded reciprocal; ``mu_hat = psi mu``.
    A : MatrixField
        Symmetric, locally uniformly elliptic diffusion matrix.
    B : VectorField
        Drift perturbation, divergence free with respect to ``mu_hat``.
    psi_floor : float
        Values of psi below this are replaced by it; each replacement is
        counted in ``floor_counter``.
    """

    rho: ScalarField
    psi: ScalarField
    A: MatrixField
    B: VectorField
    psi_floor: float = PSI_FLOOR
    name: str = ""
    floor_counter: FloorCounter = field(default_factory=FloorCounter, repr=False)

    def __post_init__(self):
        dims = {self.rho.dim, self.psi.dim, self.A.dim, self.B.dim}
        if len(dims) != 1:
            raise ValueError(f"inconsistent field dimensions {sorted(dims)}")
        if not self.A.symmetric:
            raise NotSymmetric("the diffusion matrix A must be flagged symmetric")
        if not self.psi_floor > 0:
            raise ValueError("psi_floor must be positive")

    @property
    def dim(self):
        return self.rho.dim

    @property
    def singular_points(self):
        return merge_singular_points(self.rho, self.psi, self.A, self.B)

    def is_singular(self, x):
        x = as_points(x, self.dim)
        mask = np.zeros(x.shape[:-1], dtype=bool)
        for s in self.singular_points:
            mask |= np.all(x == s, axis=-1)
        return mask

    def require_regular(self, x):
        x = as_points(x, self.dim)
        if np.any(self.is_singular(x)):
            raise SingularPoint(f"{self.name or 'coefficients'}: evaluation at a declared singular point")
        return x

    def psi_values(self, x):
        """psi at x with the floor applied; floored evaluations are counted."""
        p = self.psi(x)
        low = p < self.psi_floor
        if np.any(low):
            self.floor_counter.add(np.count_nonzero(low))
            p = np.where(low, self.psi_floor, p)
        return p

    def density(self, x):
        """Unnormalized density ``psi * rho`` of mu_hat."""
        x = as_points(x, self.dim)
        return self.psi(x) * self.rho(x)

    def a_hat(self, x):
        x = self.require_regular(x)
        return self.A(x) / self.psi_values(x)[..., None, None]

    def beta(self, x):
        return log_derivative(self, x)

    def drift(self, x, direction="forward"):
        _check_direction(direction)
        b = self.B(self.require_regular(x))
        return log_derivative(self, x) + (b if direction == "forward" else -b)

    def dispersion(self, x):
        return dispersion(self, x)

    def generator(self, u, x, direction="forward"):
        return generator_apply(self, u, x, direction)

    def dual(self):
        """Coefficients of the co-generator: same data with B replaced by -B."""
        return replace(self, B=-self.B, name=_dual_name(self.name), floor_counter=FloorCounter())

    def with_B(self, B, name=None):
        return replace(self, B=B, name=name or self.name, floor_counter=FloorCounter())


def _dual_name(name):
    if name.endswith(" [dual]"):
        return name[: -len(" [dual]")]
    return f"{name} [dual]" if name else "[dual]"


@dataclass(frozen=True)
class MeasureDensity:
    """Density of mu_hat with optional normalization constant.

    ``mode`` is ``"finite-normalized"`` when ``normalization`` is the total
    mass and ``"sigma-finite"`` otherwise.
    """

    density: ScalarField
    normalization: float | None = None
    mode: str = "sigma-finite"

    def __post_init__(self):
        if self.mode not in ("finite-normalized", "sigma-finite"):
            raise ValueError(f"unknown measure mode {self.mode!r}")
        if self.mode == "finite-normalized" and not (self.normalization and self.normalization > 0):
            raise ValueError("finite-normalized measure needs a positive normalization")

    def __call__(self, x):
        return self.density(x)

    def normalized(self, x):
        if self.normalization is None:
            raise ValueError("measure has no normalization constant")
        return self.density(x) / self.normalization


def measure_of(cs: CoefficientSet, normalization=None) -> MeasureDensity:
    dens = ScalarField(cs.dim, cs.density, singular_points=cs.singular_points, name=f"mu_hat[{cs.name}]")
    if normalization is None:
        return MeasureDensity(dens)
    return MeasureDensity(dens, float(normalization), "finite-normalized")


# --- operations ---------------------------------------------------------------

def log_derivative(cs: CoefficientSet, x) -> np.ndarray:
    """``(1/(2 psi)) div A + (1/(2 psi rho)) A grad(rho)`` at x."""
    x = cs.require_regular(x)
    psi = cs.psi_values(x)
    div_a = cs.A.divergence(x)
    glog = cs.rho.log_gradient(x)
    out = (div_a + np.einsum("...ij,...j->...i", cs.A(x), glog)) / (2.0 * psi[..., None])
    if not np.all(np.isfinite(out)):
        raise NonFinite(f"{cs.name or 'coefficients'}: non-finite logarithmic derivative")
    return out


def assemble_drift(cs: CoefficientSet, direction="forward") -> VectorField:
    """The drift field ``beta + B`` (``beta - B`` for the dual direction)."""
    _check_direction(direction)
    return VectorField(cs.dim, lambda x: cs.drift(x, direction), singular_points=cs.singular_points,
                       name=f"G[{cs.name}]" if direction == "forward" else f"G'[{cs.name}]")


def psd_sqrt(M, clip=EIG_CLIP):
    """Symmetric positive semidefinite square root of a stack of matrices."""
    w, V = np.linalg.eigh(M)
    if np.any(w < -clip):
        raise NotPSD(f"matrix has eigenvalue {w.min():.3e} < -{clip:g}")
    w = np.where(w < 0.0, 0.0, w)
    return np.einsum("...ik,...k,...jk->...ij", V, np.sqrt(w), V)


def dispersion(cs: CoefficientSet, x) -> np.ndarray:
    """``psi^{-1/2} sqrt(A)`` with the symmetric PSD root of A."""
    x = cs.require_regular(x)
    A = cs.A(x)
    if cs.A.diagonal:
        diag = np.diagonal(A, axis1=-2, axis2=-1)
        if np.any(diag < -EIG_CLIP):
            raise NotPSD(f"diagonal diffusion entry {diag.min():.3e} < -{EIG_CLIP:g}")
        sigma = np.zeros_like(A)
        idx = np.arange(cs.dim)
        sigma[..., idx, idx] = np.sqrt(np.clip(diag, 0.0, None))
    else:
        sigma = psd_sqrt(A)
    return sigma / np.sqrt(cs.psi_values(x))[..., None, None]


def _half_trace(a_hat, hess):
    return 0.5 * np.einsum("...ij,...ji->...", a_hat, hess)


def symmetric_generator_apply(cs: CoefficientSet, u: ScalarField, x) -> np.ndarray:
    """The symmetric part ``1/2 tr(A_hat D^2 u) + <beta, grad u>``."""
    x = cs.require_regular(x)
    return _half_trace(cs.a_hat(x), u.hessian(x)) + np.einsum("...i,...i->...", cs.beta(x), u.gradient(x))


def generator_apply(cs: CoefficientSet, u: ScalarField, x, direction="forward") -> np.ndarray:
    """Apply the generator (``dual``: the co-generator) to u at x."""
    _check_direction(direction)
    x = cs.require_regular(x)
    return _half_trace(cs.a_hat(x), u.hessian(x)) + np.einsum("...i,...i->...", cs.drift(x, direction),
                                                              u.gradient(x))


def _antisymmetry_probe(dim, n=64):
    from scipy.stats import qmc

    pts = qmc.Halton(d=dim, scramble=False).random(n + 1)[1:]
    return 6.0 * pts - 3.0


def antisymmetric_divfree(rho: ScalarField, psi: ScalarField, C: MatrixField, psi_floor=PSI_FLOOR) -> VectorField:
    """Divergence-free field built from an anti-symmetric matrix C.

    Returns ``x -> (1/(2 psi)) div C + (1/(2 psi rho)) C^T grad(rho)``, which
    satisfies ``int <B, grad u> psi rho dx = 0`` for all test functions u.
    """
    d = C.dim
    singular = merge_singular_points(rho, psi, C)

    def check(M):
        err = np.abs(M + np.swapaxes(M, -1, -2))
        if err.size and np.nanmax(err) > ANTISYM_TOL:
            raise NotAntisymmetric(f"|C + C^T| = {np.nanmax(err):.3e} exceeds {ANTISYM_TOL:g}")

    probe = _antisymmetry_probe(d)
    mask = np.zeros(len(probe), dtype=bool)
    for s in singular:
        mask |= np.all(probe == s, axis=-1)
    check(C(probe[~mask]))

    def fn(x):
        M = C(x)
        check(M)
        p = psi(x)
        p = np.where(p < psi_floor, psi_floor, p)
        v = C.divergence(x) + np.einsum("...ji,...j->...i", M, rho.log_gradient(x))
        return v / (2.0 * p[..., None])

    def potential(x):
        return rho(x)[..., None, None] * C(x)

    return VectorField(d, fn, singular_points=singular, name=f"divfree[{C.name}]", flux_potential=potential)


# --- d = 1 density from a prescribed drift ---------------------------------------

_GL_CACHE = {}


def _gauss_legendre(n):
    if n not in _GL_CACHE:
        _GL_CACHE[n] = np.polynomial.legendre.leggauss(n)
    return _GL_CACHE[n]


def _drift_integrand(a, psi, g_hat):
    def q(y):
        pts = y[..., None]
        av = a(pts)
        if np.any(av <= 0):
            raise NonPositiveDiffusion("diffusion coefficient a <= 0 on the integration path")
        return 2.0 / av * (psi(pts) * g_hat(pts) - 0.5 * a.gradient(pts)[..., 0])

    return q


def _log_rho_1d(q, x, panels, order=32):
    nodes, weights = _gauss_legendre(order)
    x = np.asarray(x, dtype=float)
    edges = np.linspace(0.0, 1.0, panels + 1)
    t = (0.5 * (edges[:-1, None] + edges[1:, None]) + 0.5 * (edges[1:, None] - edges[:-1, None]) * nodes).ravel()
    w = (0.5 * (edges[1:, None] - edges[:-1, None]) * weights).ravel()
    y = x[..., None] * t
    return x * np.sum(w * q(y), axis=-1)


def rho_from_drift_1d(a: ScalarField, psi: ScalarField, g_hat: ScalarField, x, panels=None, rtol=1e-13,
                      max_panels=4096):
    """Density making ``g_hat`` the drift of a one-dimensional generator.

    ``rho(x) = exp( int_0^x (2 / a(y)) (psi(y) g_hat(y) - a'(y) / 2) dy )``.
    The integral uses composite Gauss-Legendre panels, doubled until the log
    density changes by less than ``rtol`` (or a fixed ``panels`` count).
    """
    for f in (a, psi, g_hat):
        if f.dim != 1:
            raise ValueError("rho_from_drift_1d needs one-dimensional fields")
    q = _drift_integrand(a, psi, g_hat)
    if panels is not None:
        return np.exp(_log_rho_1d(q, x, int(panels)))
    n = 1
    prev = _log_rho_1d(q, x, n)
    while True:
        n *= 2
        cur = _log_rho_1d(q, x, n)
        if np.all(np.abs(cur - prev) <= rtol * (1.0 + np.abs(cur))) or n >= max_panels:
            return np.exp(cur)
        prev = cur


def constructed_density_1d(a: ScalarField, psi: ScalarField, g_hat: ScalarField, name="rho[constructed]"):
    """ScalarField wrapping :func:`rho_from_drift_1d` with its exact log-derivative."""
    q = _drift_integrand(a, psi, g_hat)

    def fn(x):
        return rho_from_drift_1d(a, psi, g_hat, x[..., 0])

    def log_grad(x):
        return q(x[..., 0])[..., None]

    def grad(x):
        return fn(x)[..., None] * log_grad(x)

    return ScalarField(1, fn, grad=grad, log_grad=log_grad, name=name)
