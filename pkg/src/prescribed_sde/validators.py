"""Quadrature and sampling checks of the structural assumptions: ellipticity,
weak divergence freeness of B, infinitesimal invariance of mu_hat, the
integration-by-parts identity for the symmetric part, and the explicit
growth conditions that certify conservativeness."""
from __future__ import annotations

import math

import numpy as np
from scipy.special import gammaln

from .coefficients import (CoefficientSet, MeasureDensity, generator_apply,
                           symmetric_generator_apply)
from .fields import ScalarField, as_points
from .quadrature import box_rule, default_nodes, halton_box, halton_shell, integrate_checked
from .report import ReportEntry

INTEGRAL_TOL = 1e-6
INEQ_SLACK = 1e-10
ANNULUS_SLACK = 0.05


# --- test functions -------------------------------------------------------------

def _bump_factors(t):
    """eta(t) = exp(-1/(1-t^2)) and its log-derivatives; zero outside (-1, 1)."""
    inside = np.abs(t) < 1.0
    ts = np.where(inside, t, 0.0)
    q = 1.0 - ts**2
    eta = np.where(inside, np.exp(-1.0 / q), 0.0)
    l1 = np.where(inside, -2.0 * ts / q**2, 0.0)
    l2 = np.where(inside, (6.0 * ts**4 - 2.0) / q**4, 0.0)
    return eta, l1, l2


class TestFunction(ScalarField):
    """Smooth compactly supported function with analytic derivatives.

    ``support_box`` is a pair ``(lo, hi)``; the function and its first two
    derivatives vanish identically outside it.
    """

    __test__ = False  # keep pytest from collecting this class

    def __init__(self, dim, fn, grad, hess, support_box, name=None):
        super().__init__(dim, fn, grad=grad, hess=hess, name=name)
        lo, hi = support_box
        self.support_box = (np.asarray(lo, dtype=float), np.asarray(hi, dtype=float))

    def __add__(self, other):
        lo = np.minimum(self.support_box[0], other.support_box[0])
        hi = np.maximum(self.support_box[1], other.support_box[1])
        return TestFunction(self.dim, lambda x: self(x) + other(x),
                            lambda x: self.gradient(x) + other.gradient(x),
                            lambda x: self.hessian(x) + other.hessian(x), (lo, hi),
                            name=f"({self.name} + {other.name})")

    def __mul__(self, c):
        c = float(c)
        return TestFunction(self.dim, lambda x: c * self(x), lambda x: c * self.gradient(x),
                            lambda x: c * self.hessian(x), self.support_box, name=f"{c:g}*{self.name}")

    __rmul__ = __mul__


def poly_bump(center, radii, a0=1.0, lin=None, quad=None, name=None):
    """``p(x) * prod_i eta((x_i - c_i) / r_i)`` with p a quadratic polynomial
    in ``x - c``: ``p = a0 + <lin, y> + y^T quad y``."""
    c = np.atleast_1d(np.asarray(center, dtype=float))
    r = np.broadcast_to(np.asarray(radii, dtype=float), c.shape).copy()
    d = c.size
    lin = np.zeros(d) if lin is None else np.asarray(lin, dtype=float)
    Q = np.zeros((d, d)) if quad is None else np.asarray(quad, dtype=float)
    Q = 0.5 * (Q + Q.T)

    def parts(x):
        x = as_points(x, d)
        y = x - c
        eta, l1, l2 = _bump_factors(y / r)
        b = np.prod(eta, axis=-1)
        p = a0 + y @ lin + np.einsum("...i,ij,...j->...", y, Q, y)
        gp = lin + 2.0 * y @ Q
        gb = b[..., None] * l1 / r
        return y, b, l1, l2, p, gp, gb

    def fn(x):
        _, b, _, _, p, _, _ = parts(x)
        return p * b

    def grad(x):
        _, b, _, _, p, gp, gb = parts(x)
        return p[..., None] * gb + b[..., None] * gp

    def hess(x):
        _, b, l1, l2, p, gp, gb = parts(x)
        s = l1 / r
        Hb = b[..., None, None] * np.einsum("...i,...j->...ij", s, s)
        idx = np.arange(d)
        Hb[..., idx, idx] = b[..., None] * l2 / r**2
        return (p[..., None, None] * Hb + np.einsum("...i,...j->...ij", gp, gb)
                + np.einsum("...i,...j->...ij", gb, gp) + b[..., None, None] * 2.0 * Q)

    return TestFunction(d, fn, grad, hess, (c - r, c + r), name=name or "poly_bump")


def radial_bump(center, radius, name=None):
    """``exp(-1 / (1 - |x - c|^2 / R^2))`` inside the ball, zero outside."""
    c = np.atleast_1d(np.asarray(center, dtype=float))
    R2 = float(radius) ** 2
    d = c.size

    def parts(x):
        y = as_points(x, d) - c
        s = np.sum(y * y, axis=-1) / R2
        inside = s < 1.0
        q = np.where(inside, 1.0 - s, 1.0)
        e = np.where(inside, np.exp(-1.0 / q), 0.0)
        e1 = -e / q**2
        e2 = e * (1.0 / q**4 - 2.0 / q**3)
        return y, e, e1, e2

    def fn(x):
        return parts(x)[1]

    def grad(x):
        y, _, e1, _ = parts(x)
        return (2.0 / R2) * e1[..., None] * y

    def hess(x):
        y, _, e1, e2 = parts(x)
        H = (4.0 / R2**2) * e2[..., None, None] * np.einsum("...i,...j->...ij", y, y)
        idx = np.arange(d)
        H[..., idx, idx] += (2.0 / R2) * e1[..., None]
        return H

    r = float(radius)
    return TestFunction(d, fn, grad, hess, (c - r, c + r), name=name or "radial_bump")


class TestFunctionBattery:
    """A reproducible family of compactly supported test functions.

    Centers are drawn inside ``support_box`` away from the origin so that no
    radial symmetry of the coefficients makes a check pass by accident; each
    function's own support box lies inside ``support_box``.
    """

    __test__ = False

    def __init__(self, dim, support_box=None, n=12, seed=0):
        if support_box is None:
            support_box = (-2.0 * np.ones(dim), 2.0 * np.ones(dim))
        lo = np.asarray(support_box[0], dtype=float) * np.ones(dim)
        hi = np.asarray(support_box[1], dtype=float) * np.ones(dim)
        self.dim = dim
        self.support_box = (lo, hi)
        rng = np.random.default_rng(seed)
        half = 0.5 * (hi - lo)
        mid = 0.5 * (hi + lo)
        fns = []
        for k in range(n):
            r = half * rng.uniform(0.35, 0.6, size=dim)
            c = rng.uniform(lo + r, hi - r)
            if k == 0:
                c = np.clip(mid + 0.13 * half, lo + r, hi - r)
            lin = rng.normal(size=dim)
            Q = rng.normal(size=(dim, dim)) * 0.5
            fns.append(poly_bump(c, r, a0=rng.uniform(0.5, 1.5), lin=lin, quad=Q, name=f"battery[{k}]"))
        self.functions = fns

    def __iter__(self):
        return iter(self.functions)

    def __len__(self):
        return len(self.functions)

    def __getitem__(self, k):
        return self.functions[k]

    def pairs(self, n_pairs=20, seed=1):
        """Deterministic (f, g) index pairs, self-pairs included."""
        rng = np.random.default_rng(seed)
        n = len(self.functions)
        out = [(k, k) for k in range(min(n, n_pairs // 4))]
        while len(out) < n_pairs:
            i, j = (int(v) for v in rng.integers(0, n, size=2))
            out.append((i, j))
        return out


# --- helpers --------------------------------------------------------------------

def _support(f, fallback=None):
    box = getattr(f, "support_box", None)
    if box is None:
        if fallback is None:
            raise ValueError(f"{f.name} has no declared support box")
        return fallback
    return box


def _integral_check(check_id, cs, battery, integrand, tol, n, what):
    worst = 0.0
    worst_name = ""
    max_change = 0.0
    values = []
    for u in battery:
        lo, hi = _support(u)

        def both(x, u=u):
            v = integrand(u, x)
            return np.stack([v, np.abs(v)], axis=-1)

        (val, mag), change = integrate_checked(both, lo, hi, tol, n=n, singular_points=cs.singular_points,
                                                checked=0)
        m = abs(val) / (1.0 + mag)
        values.append(float(val))
        max_change = max(max_change, float(change))
        if m >= worst:
            worst, worst_name = m, u.name
    details = (f"max over {len(values)} test functions of |{what}| / (1 + int |integrand|); "
               f"worst {worst_name}; quadrature doubling change {max_change:.2e}")
    return ReportEntry(check_id, worst, tol, details, data={"integrals": values})


def integral_divergence_free(cs, u, n=None):
    """``int <B, grad u> psi rho dx`` over u's support box."""
    lo, hi = _support(u)
    return float(integrate_checked(lambda x: _divfree_integrand(cs, u, x), lo, hi, INTEGRAL_TOL, n=n,
                                   singular_points=cs.singular_points)[0])


def integral_invariance(cs, u, n=None, direction="forward"):
    """``int (L u) psi rho dx`` over u's support box."""
    lo, hi = _support(u)
    return float(integrate_checked(lambda x: _invariance_integrand(cs, u, x, direction), lo, hi, INTEGRAL_TOL,
                                   n=n, singular_points=cs.singular_points)[0])


def _divfree_integrand(cs, u, x):
    return np.einsum("...i,...i->...", cs.B(x), u.gradient(x)) * cs.density(x)


def _invariance_integrand(cs, u, x, direction="forward"):
    return generator_apply(cs, u, x, direction) * cs.density(x)


# --- checks ---------------------------------------------------------------------

def check_ellipticity(cs: CoefficientSet, box, n_samples=256, matrix="A"):
    """Smallest and largest eigenvalue of A (or A_hat) over Halton points.

    Returns ``(lam, Lam, entry)``; the entry fails when ``lam <= 0``.
    """
    if n_samples < 100:
        raise ValueError("check_ellipticity needs n_samples >= 100")
    lo, hi = box
    d = cs.dim
    pts = halton_box(np.ones(d) * lo, np.ones(d) * hi, n_samples, exclude=cs.singular_points)
    M = cs.A(pts) if matrix == "A" else cs.a_hat(pts)
    w = np.linalg.eigvalsh(M)
    lam, Lam = float(w.min()), float(w.max())
    # metric <= 0 iff lam > 0
    entry = ReportEntry("ellipticity", -lam, -np.finfo(float).tiny,
                        f"eigenvalues of {matrix} on {len(pts)} Halton points in the box: "
                        f"min {lam:.6g}, max {Lam:.6g}",
                        data={"lambda": lam, "Lambda": Lam})
    return lam, Lam, entry


def check_divergence_free(cs: CoefficientSet, battery, n=None, tol=INTEGRAL_TOL):
    """``int <B, grad u> dmu_hat = 0`` for each test function u."""
    return _integral_check("divergence_free", cs, battery, lambda u, x: _divfree_integrand(cs, u, x), tol, n,
                           "int <B, grad u> dmu_hat")


def check_infinitesimal_invariance(cs: CoefficientSet, battery, n=None, tol=INTEGRAL_TOL,
                                   direction="forward"):
    """``int L u dmu_hat = 0`` for each test function u."""
    return _integral_check(f"infinitesimal_invariance[{direction}]" if direction != "forward"
                           else "infinitesimal_invariance", cs, battery,
                           lambda u, x: _invariance_integrand(cs, u, x, direction), tol, n, "int L u dmu_hat")


def dirichlet_form(cs, f, g, n=None):
    """``1/2 int <A_hat grad f, grad g> dmu_hat`` with its absolute magnitude."""
    lo, hi = _ibp_box(f, g)
    if lo is None:
        return 0.0, 0.0

    def integrand(x):
        v = 0.5 * np.einsum("...ij,...i,...j->...", cs.a_hat(x), f.gradient(x), g.gradient(x)) * cs.density(x)
        return np.stack([v, np.abs(v)], axis=-1)

    (val, mag), _ = integrate_checked(integrand, lo, hi, INTEGRAL_TOL, n=n, singular_points=cs.singular_points,
                                      checked=0)
    return float(val), float(mag)


def generator_pairing(cs, f, g, n=None):
    """``int (L0 f) g dmu_hat`` with its absolute magnitude."""
    lo, hi = _ibp_box(f, g)
    if lo is None:
        return 0.0, 0.0

    def integrand(x):
        v = symmetric_generator_apply(cs, f, x) * g(x) * cs.density(x)
        return np.stack([v, np.abs(v)], axis=-1)

    (val, mag), _ = integrate_checked(integrand, lo, hi, INTEGRAL_TOL, n=n, singular_points=cs.singular_points,
                                      checked=0)
    return float(val), float(mag)


def _ibp_box(f, g):
    bf = getattr(f, "support_box", None)
    bg = getattr(g, "support_box", None)
    if bf is None and bg is None:
        raise ValueError("integration by parts needs at least one compactly supported function")
    bf = bf or bg
    bg = bg or bf
    lo = np.maximum(bf[0], bg[0])
    hi = np.minimum(bf[1], bg[1])
    if np.any(hi <= lo):
        return None, None
    return lo, hi


def check_integration_by_parts(cs: CoefficientSet, f, g, n=None, tol=INTEGRAL_TOL):
    """``E0(f, g) = -int (L0 f) g dmu_hat`` for the symmetric part L0."""
    e, e_mag = dirichlet_form(cs, f, g, n)
    p, p_mag = generator_pairing(cs, f, g, n)
    metric = abs(e + p) / (1.0 + e_mag + p_mag)
    return ReportEntry("integration_by_parts", metric, tol,
                       f"E0({f.name}, {g.name}) = {e:.12g}, int (L0 f) g dmu_hat = {p:.12g}",
                       data={"energy": e, "pairing": p})


def lyapunov_function(dim, N0):
    """``u(x) = ln(max(|x|^2, N0^2)) + 2`` with derivatives valid for |x| > N0."""
    N0sq = float(N0) ** 2

    def fn(x):
        return np.log(np.maximum(np.sum(x * x, axis=-1), N0sq)) + 2.0

    def grad(x):
        r2 = np.sum(x * x, axis=-1)
        out = 2.0 * x / r2[..., None]
        return np.where((r2 > N0sq)[..., None], out, 0.0)

    def hess(x):
        r2 = np.sum(x * x, axis=-1)[..., None, None]
        H = 2.0 * np.eye(dim) / r2 - 4.0 * np.einsum("...i,...j->...ij", x, x) / r2**2
        return np.where(r2 > N0sq, H, 0.0)

    return ScalarField(dim, fn, grad=grad, hess=hess, name=f"lyapunov[N0={N0:g}]")


def _shell_points(cs, N0, R_max, n_samples):
    R_max = 10.0 * N0 if R_max is None else float(R_max)
    if R_max <= N0:
        raise ValueError("R_max must exceed N0")
    return R_max, halton_shell(cs.dim, float(N0), R_max, n_samples, exclude=cs.singular_points)


def _range_text(N0, R_max, n):
    return f"verified on N0 = {N0:g} < |x| <= R_max = {R_max:g} at {n} quasi-random points (not a proof beyond R_max)"


def check_lyapunov_conservative(cs: CoefficientSet, M, N0, direction="forward", n_samples=4096, R_max=None):
    """``L u <= M u`` (``L' u`` for ``dual``) outside the ball of radius N0."""
    if not M > 0 or not N0 >= 1:
        raise ValueError("need M > 0 and N0 >= 1")
    R_max, pts = _shell_points(cs, N0, R_max, n_samples)
    u = lyapunov_function(cs.dim, N0)
    excess = generator_apply(cs, u, pts, direction) - M * u(pts)
    k = int(np.argmax(excess))
    worst = float(excess[k])
    return ReportEntry(f"lyapunov[{direction}]", worst, INEQ_SLACK,
                       f"max (Lu - Mu) = {worst:.6g} at x = {np.array2string(pts[k], precision=4)}; M = {M:g}; "
                       + _range_text(N0, R_max, len(pts)),
                       data={"M": M, "N0": N0, "R_max": R_max, "worst_point": pts[k].tolist()})


GROWTH_VARIANTS = ("G-form", "B-plus", "B-minus", "divfree-form")


def growth_lhs(cs: CoefficientSet, variant, x):
    """Left-hand side of the chosen growth condition at x."""
    x = cs.require_regular(x)
    r2 = np.sum(x * x, axis=-1)
    if variant == "divfree-form":
        Ax = np.einsum("...ij,...i,...j->...", cs.A(x), x, x)
        return Ax / (cs.psi_values(x) * r2) + np.abs(np.einsum("...i,...i->...", cs.B(x), x))
    if variant not in GROWTH_VARIANTS:
        raise ValueError(f"unknown growth variant {variant!r}")
    Ah = cs.a_hat(x)
    direction = "dual" if variant == "B-minus" else "forward"
    G = cs.drift(x, direction)
    return (-np.einsum("...ij,...i,...j->...", Ah, x, x) / r2 + 0.5 * np.trace(Ah, axis1=-2, axis2=-1)
            + np.einsum("...i,...i->...", G, x))


def growth_rhs(variant, M, x):
    r = np.linalg.norm(x, axis=-1)
    if variant == "divfree-form":
        return M * r**2 * np.log(r + 1.0)
    return M * r**2 * (np.log(r) + 1.0)


def check_growth_condition(cs: CoefficientSet, variant, M, N0, n_samples=4096, R_max=None):
    """Sampled maximum of ``LHS - RHS`` of an explicit growth condition.

    ``G-form`` and ``B-plus`` use the forward drift beta + B, ``B-minus`` the
    dual drift beta - B, ``divfree-form`` the bound on
    ``<A x, x> / (psi |x|^2) + |<B, x>|``.
    """
    if variant not in GROWTH_VARIANTS:
        raise ValueError(f"unknown growth variant {variant!r}")
    R_max, pts = _shell_points(cs, N0, R_max, n_samples)
    excess = growth_lhs(cs, variant, pts) - growth_rhs(variant, M, pts)
    k = int(np.argmax(excess))
    worst = float(excess[k])
    return ReportEntry(f"growth[{variant}]", worst, INEQ_SLACK,
                       f"max (LHS - RHS) = {worst:.6g} at x = {np.array2string(pts[k], precision=4)}; M = {M:g}; "
                       + _range_text(N0, R_max, len(pts)),
                       data={"M": M, "N0": N0, "R_max": R_max, "worst_point": pts[k].tolist()})


def _unit_sphere_area(d):
    return math.exp(math.log(2.0) + 0.5 * d * math.log(math.pi) - gammaln(0.5 * d))


def shell_mass(measure: MeasureDensity, r_in, r_out, n_r=64, n_dir=None):
    """``mu_hat(B_{r_out} minus B_{r_in})`` by radial Gauss-Legendre times an
    angular rule (exact sign pair in d=1, trapezoid in d=2, Halton directions
    for d >= 3)."""
    d = measure.density.dim
    t, w = np.polynomial.legendre.leggauss(n_r)
    r = 0.5 * (r_in + r_out) + 0.5 * (r_out - r_in) * t
    wr = 0.5 * (r_out - r_in) * w * r ** (d - 1)
    if d == 1:
        dirs = np.array([[1.0], [-1.0]])
        wd = np.ones(2)
    elif d == 2:
        m = n_dir or 256
        th = 2.0 * np.pi * np.arange(m) / m
        dirs = np.stack([np.cos(th), np.sin(th)], axis=-1)
        wd = np.full(m, 2.0 * np.pi / m)
    else:
        m = n_dir or 4096
        dirs = halton_shell(d, 0.0, 1.0, m)
        dirs /= np.linalg.norm(dirs, axis=1, keepdims=True)
        wd = np.full(len(dirs), _unit_sphere_area(d) / len(dirs))
    pts = r[:, None, None] * dirs[None, :, :]
    vals = measure(pts.reshape(-1, d)).reshape(len(r), len(dirs))
    return float(wr @ vals @ wd)


def check_annulus_volume(measure: MeasureDensity, c, n_max=8):
    """``mu_hat(B_{4n} minus B_{2n}) <= (4n)^c`` for n = 1..n_max (5% slack)."""
    if not c > 0:
        raise ValueError("c must be positive")
    ratios = []
    for n in range(1, n_max + 1):
        mass = shell_mass(measure, 2.0 * n, 4.0 * n)
        ratios.append(mass / (4.0 * n) ** c)
    worst = max(ratios)
    return ReportEntry("annulus_volume", worst, 1.0 + ANNULUS_SLACK,
                       f"max over n = 1..{n_max} of mu_hat(B_4n minus B_2n) / (4n)^c with c = {c:g}",
                       data={"ratios": ratios})


__all__ = [
    "TestFunction", "TestFunctionBattery", "poly_bump", "radial_bump", "check_ellipticity",
    "check_divergence_free", "check_infinitesimal_invariance", "check_integration_by_parts",
    "check_lyapunov_conservative", "check_growth_condition", "check_annulus_volume", "lyapunov_function",
    "growth_lhs", "growth_rhs", "shell_mass", "dirichlet_form", "generator_pairing",
    "integral_divergence_free", "integral_invariance", "GROWTH_VARIANTS", "default_nodes", "box_rule",
]
