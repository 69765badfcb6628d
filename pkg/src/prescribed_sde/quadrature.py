"""Tensor Gauss-Legendre rules with dyadic refinement toward singular points,
plus quasi-random point sets used by the sampled checks."""
from __future__ import annotations

import itertools

import numpy as np
from scipy.special import ndtri
from scipy.stats import qmc

from .errors import QuadratureNonConvergent

MC_POINTS_LOG2 = 20  # ~1e6 points for d >= 4
REFINE_LEVELS = 40


def default_nodes(dim):
    if dim <= 2:
        return 64
    if dim == 3:
        return 24
    return None  # quasi Monte Carlo


_GL = {}


def _gl_1d(n):
    if n not in _GL:
        _GL[n] = np.polynomial.legendre.leggauss(n)
    return _GL[n]


def _tensor_gl(lo, hi, n):
    x, w = _gl_1d(n)
    axes = [0.5 * (a + b) + 0.5 * (b - a) * x for a, b in zip(lo, hi)]
    wts = [0.5 * (b - a) * w for a, b in zip(lo, hi)]
    pts = np.stack(np.meshgrid(*axes, indexing="ij"), axis=-1).reshape(-1, len(lo))
    wt = wts[0]
    for extra in wts[1:]:
        wt = np.multiply.outer(wt, extra)
    return pts, np.asarray(wt).reshape(-1)


def _split_at(lo, hi, s):
    cuts = []
    for a, b, c in zip(lo, hi, s):
        cuts.append([(a, c), (c, b)] if a < c < b else [(a, b)])
    for combo in itertools.product(*cuts):
        plo = np.array([c[0] for c in combo])
        phi = np.array([c[1] for c in combo])
        if np.all(phi > plo):
            yield plo, phi


def _corner_rule(lo, hi, s, n_ref, rest, levels, out):
    n_top = n_ref
    for level in range(levels):
        # deep cells only resolve the scale-free corner behaviour
        n_ref = max(8, n_top >> min(level, 2))
        mid = 0.5 * (lo + hi)
        keep = None
        for corner in itertools.product((0, 1), repeat=len(lo)):
            c = np.array(corner)
            clo = np.where(c == 0, lo, mid)
            chi = np.where(c == 0, mid, hi)
            touches = np.all((s == clo) | (s == chi))
            if touches and keep is None:
                keep = (clo, chi)
            else:
                _rule(clo, chi, n_ref, rest, levels, n_ref, out)
        lo, hi = keep
    out.append(_tensor_gl(lo, hi, n_ref))


def _rule(lo, hi, n, singular, levels, n_ref, out):
    inside = [s for s in singular if np.all(s >= lo) and np.all(s <= hi)]
    if not inside:
        out.append(_tensor_gl(lo, hi, n))
        return
    s, rest = inside[0], inside[1:]
    for plo, phi in _split_at(lo, hi, s):
        _corner_rule(plo, phi, s, n_ref, rest, levels, out)


def box_rule(lo, hi, n=None, singular_points=(), levels=REFINE_LEVELS, n_refine=None, seed=0):
    """Points and weights integrating over the box ``[lo, hi]``.

    Tensor Gauss-Legendre with ``n`` nodes per axis. Sub-boxes touching a
    declared singular point are split so the point becomes a vertex and then
    refined dyadically toward it for ``levels`` levels, so no node ever lands
    on the point. For ``n=None`` in dimension >= 4 a scrambled Sobol rule
    with 2**20 points is used instead.
    """
    lo = np.asarray(lo, dtype=float)
    hi = np.asarray(hi, dtype=float)
    if lo.shape != hi.shape or np.any(hi <= lo):
        raise ValueError("box needs hi > lo on every axis")
    d = lo.size
    if n is None:
        n = default_nodes(d)
    if n is None:
        return sobol_box(lo, hi, 2**MC_POINTS_LOG2, seed=seed)
    n_refine = n_refine or max(8, n // 2)
    out = []
    singular = [np.asarray(s, dtype=float) for s in singular_points]
    _rule(lo, hi, int(n), singular, levels, int(n_refine), out)
    pts = np.concatenate([p for p, _ in out])
    wts = np.concatenate([w for _, w in out])
    return pts, wts


def sobol_box(lo, hi, n_points, seed=0):
    lo = np.asarray(lo, dtype=float)
    hi = np.asarray(hi, dtype=float)
    m = int(np.ceil(np.log2(n_points)))
    u = qmc.Sobol(d=lo.size, scramble=True, seed=seed).random_base2(m)
    vol = float(np.prod(hi - lo))
    return lo + (hi - lo) * u, np.full(len(u), vol / len(u))


def integrate(f, lo, hi, n=None, singular_points=(), **kw):
    """Integral of ``f`` (batched, values ``(N,)`` or ``(N, k)``) over a box."""
    pts, wts = box_rule(lo, hi, n, singular_points, **kw)
    return np.tensordot(wts, np.asarray(f(pts)), axes=(0, 0))


def integrate_checked(f, lo, hi, tol, n=None, singular_points=(), checked=None, **kw):
    """Integrate at ``n`` and ``2n`` nodes; returns ``(value_2n, change)``.

    Raises QuadratureNonConvergent when the change exceeds ``10 * tol``.
    ``checked`` selects which components of a vector integrand take part in
    the comparison (default: all).
    """
    lo = np.asarray(lo, dtype=float)
    if n is None:
        n = default_nodes(lo.size)
    if n is None:
        coarse = integrate(f, lo, hi, None, singular_points, seed=0)
        fine_pts = sobol_box(lo, hi, 2 ** (MC_POINTS_LOG2 + 1), seed=0)
        fine = np.tensordot(fine_pts[1], np.asarray(f(fine_pts[0])), axes=(0, 0))
    else:
        coarse = integrate(f, lo, hi, n, singular_points, **kw)
        fine = integrate(f, lo, hi, 2 * n, singular_points, **kw)
    diff = np.abs(np.asarray(fine) - np.asarray(coarse))
    if checked is not None:
        diff = diff[checked]
    change = float(np.max(diff))
    if change > 10.0 * tol:
        raise QuadratureNonConvergent(f"doubling nodes changed the integral by {change:.3e} (> {10 * tol:.1e})")
    return fine, change


# --- quasi-random point sets ----------------------------------------------------

def halton_box(lo, hi, n, exclude=()):
    """Deterministic Halton points in a box, skipping the origin of the sequence
    and any excluded (singular) points."""
    lo = np.asarray(lo, dtype=float)
    hi = np.asarray(hi, dtype=float)
    u = qmc.Halton(d=lo.size, scramble=False).random(n + 1)[1:]
    pts = lo + (hi - lo) * u
    return _drop_points(pts, exclude)


def _drop_points(pts, exclude):
    keep = np.ones(len(pts), dtype=bool)
    for s in exclude:
        keep &= ~np.all(pts == np.asarray(s, dtype=float), axis=-1)
    return pts[keep]


def halton_shell(dim, r_min, r_max, n, exclude=()):
    """Quasi-random points with ``r_min < |x| <= r_max``.

    The radius comes from one Halton coordinate (never 0 after skipping the
    first point, so ``|x| = r_min`` is never produced); the direction from
    the remaining ones via the inverse normal CDF.
    """
    u = qmc.Halton(d=dim + 1, scramble=False).random(n + 1)[1:]
    r = r_min + (r_max - r_min) * u[:, 0]
    if dim == 1:
        direction = np.where(u[:, 1] < 0.5, -1.0, 1.0)[:, None]
    else:
        z = ndtri(np.clip(u[:, 1:], 1e-12, 1 - 1e-12))
        direction = z / np.linalg.norm(z, axis=1, keepdims=True)
    pts = r[:, None] * direction
    return _drop_points(pts, exclude)
