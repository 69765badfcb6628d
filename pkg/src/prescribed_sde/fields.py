"""Scalar, vector and matrix valued fields on R^d.

Every field evaluates on batches: a point array of shape ``(..., dim)`` maps to
``(...)`` for scalars, ``(..., dim)`` for vectors and ``(..., dim, dim)`` for
matrices. Derivatives come from user supplied closures when present and from
central finite differences otherwise.

Fields may declare a finite set of singular points where evaluation is
undefined (the coefficients only need to make sense almost everywhere).
Finite-difference helpers refuse to differentiate at those points, and the
quadrature and simulation layers steer around them.
"""
from __future__ import annotations

import numpy as np

from .errors import NonFinite, NotSymmetric, SingularPoint

DEFAULT_H = 1e-5
# second differences lose ~eps/h^2 to rounding, so the Hessian uses a larger step
DEFAULT_H_HESS = 1e-4
SYMMETRY_TOL = 1e-12


def as_points(x, dim: int) -> np.ndarray:
    x = np.asarray(x, dtype=float)
    if x.ndim == 0 or x.shape[-1] != dim:
        raise ValueError(f"expected points with trailing dimension {dim}, got shape {x.shape}")
    return x


def _singular_mask(points, x):
    mask = np.zeros(x.shape[:-1], dtype=bool)
    for s in points:
        mask |= np.all(x == s, axis=-1)
    return mask


def _normalize_points(points, dim):
    out = []
    for s in points or ():
        s = np.asarray(s, dtype=float).reshape(-1)
        if s.shape != (dim,):
            raise ValueError(f"singular point {s} does not have dimension {dim}")
        out.append(s)
    return tuple(out)


def merge_singular_points(*fields):
    """Union of the singular points declared by several fields."""
    seen = []
    for f in fields:
        for s in getattr(f, "singular_points", ()):
            if not any(np.array_equal(s, t) for t in seen):
                seen.append(s)
    return tuple(seen)


class _Field:
    def __init__(self, dim, fn, singular_points=(), name=None):
        if int(dim) < 1:
            raise ValueError("dim must be a positive integer")
        self.dim = int(dim)
        self._fn = fn
        self.singular_points = _normalize_points(singular_points, self.dim)
        self.name = name or getattr(fn, "__name__", type(self).__name__)

    def is_singular(self, x) -> np.ndarray:
        x = as_points(x, self.dim)
        return _singular_mask(self.singular_points, x)

    def __repr__(self):
        return f"{type(self).__name__}(dim={self.dim}, name={self.name!r})"


class ScalarField(_Field):
    """Real valued field with optional analytic derivatives.

    Parameters
    ----------
    dim : int
        Dimension of the domain.
    fn : callable
        Maps ``(..., dim)`` points to ``(...)`` values.
    grad, hess : callable, optional
        Analytic gradient ``(..., dim)`` and Hessian ``(..., dim, dim)``.
    log_grad : callable, optional
        Analytic gradient of ``log fn``. Used for densities whose values
        underflow far from the origin while ``grad/fn`` stays well defined.
    singular_points : sequence of points, optional
        Finite set on which the field is undefined.
    """

    def __init__(self, dim, fn, grad=None, hess=None, log_grad=None, singular_points=(), name=None):
        super().__init__(dim, fn, singular_points, name)
        self._grad = grad
        self._hess = hess
        self._log_grad = log_grad

    @property
    def has_grad(self):
        return self._grad is not None

    @property
    def has_hess(self):
        return self._hess is not None

    def __call__(self, x):
        x = as_points(x, self.dim)
        return np.asarray(self._fn(x), dtype=float)

    def gradient(self, x, h=DEFAULT_H):
        if self._grad is None:
            return fd_gradient(self, x, h)
        x = as_points(x, self.dim)
        return np.asarray(self._grad(x), dtype=float)

    def hessian(self, x, h=DEFAULT_H_HESS):
        if self._hess is None:
            return fd_hessian(self, x, h)
        x = as_points(x, self.dim)
        H = np.asarray(self._hess(x), dtype=float)
        if np.any(np.abs(H - np.swapaxes(H, -1, -2)) > SYMMETRY_TOL * (1.0 + np.abs(H))):
            raise NotSymmetric(f"analytic Hessian of {self.name} is not symmetric")
        return H

    def log_gradient(self, x, h=DEFAULT_H):
        """Gradient of ``log f``; analytic if supplied, else ``grad f / f``."""
        if self._log_grad is not None:
            x = as_points(x, self.dim)
            return np.asarray(self._log_grad(x), dtype=float)
        return self.gradient(x, h) / self(x)[..., None]


class VectorField(_Field):
    """R^dim valued field with an optional analytic Jacobian ``J[..., i, j] = d_j F_i``.

    ``flux_potential`` optionally gives an anti-symmetric matrix field S with
    ``psi rho F_j = 1/2 sum_i d_i S_ij``; grid discretizations use it to build
    exactly divergence-free face fluxes.
    """

    def __init__(self, dim, fn, jacobian=None, singular_points=(), name=None, flux_potential=None):
        super().__init__(dim, fn, singular_points, name)
        self._jac = jacobian
        self.flux_potential = flux_potential

    def __call__(self, x):
        x = as_points(x, self.dim)
        out = np.asarray(self._fn(x), dtype=float)
        if out.shape != x.shape:
            raise ValueError(f"{self.name} returned shape {out.shape} for points of shape {x.shape}")
        return out

    def jacobian(self, x, h=DEFAULT_H):
        if self._jac is None:
            return fd_jacobian(self, x, h)
        x = as_points(x, self.dim)
        return np.asarray(self._jac(x), dtype=float)

    def __neg__(self):
        fn, jac, pot = self._fn, self._jac, self.flux_potential
        return VectorField(
            self.dim,
            lambda x: -fn(x),
            None if jac is None else (lambda x: -jac(x)),
            self.singular_points,
            name=self.name[1:] if self.name.startswith("-") else f"-{self.name}",
            flux_potential=None if pot is None else (lambda x: -pot(x)),
        )

    def __add__(self, other):
        if not isinstance(other, VectorField) or other.dim != self.dim:
            return NotImplemented
        f, g = self._fn, other._fn
        jac = None
        if self._jac is not None and other._jac is not None:
            ja, jb = self._jac, other._jac
            jac = lambda x: ja(x) + jb(x)  # noqa: E731
        return VectorField(
            self.dim,
            lambda x: f(x) + g(x),
            jac,
            merge_singular_points(self, other),
            name=f"{self.name}+{other.name}",
        )

    def __sub__(self, other):
        return self + (-other)


class MatrixField(_Field):
    """dim x dim matrix valued field.

    ``divergence`` follows the column convention ``(div M)_j = sum_i d_i M_ij``.
    When it is not supplied it is computed by finite differences.
    ``diagonal`` lets consumers skip eigendecompositions.
    """

    def __init__(self, dim, fn, symmetric=False, divergence=None, diagonal=False,
                 singular_points=(), name=None):
        super().__init__(dim, fn, singular_points, name)
        self.symmetric = bool(symmetric or diagonal)
        self.diagonal = bool(diagonal)
        self._div = divergence

    def __call__(self, x):
        x = as_points(x, self.dim)
        M = np.asarray(self._fn(x), dtype=float)
        if M.shape != x.shape + (self.dim,):
            raise ValueError(f"{self.name} returned shape {M.shape} for points of shape {x.shape}")
        if self.symmetric:
            asym = np.abs(M - np.swapaxes(M, -1, -2))
            if asym.size and np.nanmax(asym) > SYMMETRY_TOL:
                raise NotSymmetric(f"{self.name} flagged symmetric but |M - M^T| = {np.nanmax(asym):.3e}")
        return M

    @property
    def has_divergence(self):
        return self._div is not None

    def divergence(self, x, h=DEFAULT_H):
        if self._div is None:
            return fd_matrix_divergence(self, x, h)
        return self._div(x)

    def transpose(self):
        fn = self._fn
        div = None
        return MatrixField(self.dim, lambda x: np.swapaxes(fn(x), -1, -2), self.symmetric,
                           div, self.diagonal, self.singular_points, name=f"{self.name}^T")


# --- finite differences -------------------------------------------------------

def _check_stencil_base(field, x, h):
    if not h > 0:
        raise ValueError("finite-difference step h must be positive")
    x = as_points(x, field.dim)
    if np.any(field.is_singular(x)):
        raise SingularPoint(f"{field.name}: finite difference requested at a declared singular point")
    return x


def _eval_checked(field, x):
    v = field(x)
    if not np.all(np.isfinite(v)):
        raise NonFinite(f"{field.name}: non-finite value in finite-difference stencil")
    return v


def _steps(x, h):
    return h * (1.0 + np.abs(x))


def fd_gradient(f: ScalarField, x, h: float = DEFAULT_H) -> np.ndarray:
    """Central-difference gradient with per-coordinate step ``h * (1 + |x_i|)``."""
    x = _check_stencil_base(f, x, h)
    steps = _steps(x, h)
    g = np.empty_like(x)
    for i in range(f.dim):
        xp = x.copy()
        xm = x.copy()
        xp[..., i] += steps[..., i]
        xm[..., i] -= steps[..., i]
        g[..., i] = (_eval_checked(f, xp) - _eval_checked(f, xm)) / (xp[..., i] - xm[..., i])
    return g


def fd_hessian(f: ScalarField, x, h: float = DEFAULT_H_HESS) -> np.ndarray:
    """Central-difference Hessian, symmetrized by averaging."""
    x = _check_stencil_base(f, x, h)
    d = f.dim
    steps = _steps(x, h)
    f0 = _eval_checked(f, x)
    H = np.empty(x.shape + (d,))
    for i in range(d):
        hi = steps[..., i]
        xp = x.copy()
        xm = x.copy()
        xp[..., i] += hi
        xm[..., i] -= hi
        H[..., i, i] = (_eval_checked(f, xp) - 2.0 * f0 + _eval_checked(f, xm)) / hi**2
        for j in range(i + 1, d):
            hj = steps[..., j]
            vals = []
            for si, sj in ((1, 1), (1, -1), (-1, 1), (-1, -1)):
                y = x.copy()
                y[..., i] += si * hi
                y[..., j] += sj * hj
                vals.append(_eval_checked(f, y))
            H[..., i, j] = (vals[0] - vals[1] - vals[2] + vals[3]) / (4.0 * hi * hj)
            H[..., j, i] = H[..., i, j]
    return 0.5 * (H + np.swapaxes(H, -1, -2))


def fd_jacobian(F: VectorField, x, h: float = DEFAULT_H) -> np.ndarray:
    x = _check_stencil_base(F, x, h)
    steps = _steps(x, h)
    J = np.empty(x.shape + (F.dim,))
    for j in range(F.dim):
        xp = x.copy()
        xm = x.copy()
        xp[..., j] += steps[..., j]
        xm[..., j] -= steps[..., j]
        J[..., :, j] = (_eval_checked(F, xp) - _eval_checked(F, xm)) / (xp[..., j] - xm[..., j])[..., None]
    return J


def fd_matrix_divergence(M: MatrixField, x, h: float = DEFAULT_H) -> np.ndarray:
    """Column divergence ``(div M)_j = sum_i d_i M_ij`` by central differences."""
    x = _check_stencil_base(M, x, h)
    steps = _steps(x, h)
    div = np.zeros_like(x)
    for i in range(M.dim):
        xp = x.copy()
        xm = x.copy()
        xp[..., i] += steps[..., i]
        xm[..., i] -= steps[..., i]
        dM = (_eval_checked(M, xp) - _eval_checked(M, xm)) / (xp[..., i] - xm[..., i])[..., None, None]
        div += dM[..., i, :]
    return div


# --- common fields ------------------------------------------------------------

def constant_scalar(dim, value=1.0, name=None):
    value = float(value)
    return ScalarField(
        dim,
        lambda x: np.full(x.shape[:-1], value),
        grad=lambda x: np.zeros(x.shape),
        hess=lambda x: np.zeros(x.shape + (x.shape[-1],)),
        log_grad=(lambda x: np.zeros(x.shape)) if value > 0 else None,
        name=name or f"const({value:g})",
    )


def zero_vector(dim, name="zero"):
    return VectorField(dim, lambda x: np.zeros(x.shape), jacobian=lambda x: np.zeros(x.shape + (x.shape[-1],)),
                       name=name)


def identity_matrix(dim, name="identity"):
    return MatrixField(
        dim,
        lambda x: np.broadcast_to(np.eye(x.shape[-1]), x.shape + (x.shape[-1],)).copy(),
        symmetric=True,
        diagonal=True,
        divergence=VectorField(dim, lambda x: np.zeros(x.shape), name="div identity"),
        name=name,
    )


def gaussian_density(dim, name="gaussian"):
    """``exp(-|x|^2)`` with analytic derivatives."""

    def fn(x):
        return np.exp(-np.sum(x * x, axis=-1))

    def grad(x):
        return -2.0 * x * fn(x)[..., None]

    def hess(x):
        e = fn(x)[..., None, None]
        return e * (4.0 * x[..., :, None] * x[..., None, :] - 2.0 * np.eye(x.shape[-1]))

    return ScalarField(dim, fn, grad=grad, hess=hess, log_grad=lambda x: -2.0 * x, name=name)
