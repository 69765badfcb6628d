"""Finite-difference generators on boxes with absorbing boundary and the
structural properties of their resolvents.

Both stencils (conservative flux form, or central diffusion with an upwind
drift) keep ``alpha I - L_h`` an M-matrix, so every resolvent is exactly
sub-Markovian.
"""
from __future__ import annotations

import itertools
from dataclasses import dataclass, field

import numpy as np
import scipy.linalg as sla
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from .coefficients import DIRECTIONS, CoefficientSet
from .errors import NonMonotoneStencil, NonFinite, NotConverged, SolverDiverged
from .report import ReportEntry

DENSE_MAX = 4000
SOLVE_RTOL = 1e-12
REFINEMENTS = 4
RESIDUAL_TOL = 1e-10
SUBMARKOV_TOL = 1e-9
CONTRACTION_TOL = 1e-9
NESTED_TOL = 1e-8
RESOLVENT_EQ_TOL = 1e-8
ADJOINT_TOL = 1e-10
GLOBAL_TOL = 1e-6


@dataclass(frozen=True)
class GridSpec:
    """Interior nodes of a box; boundary nodes are excluded (Dirichlet)."""

    lo: tuple
    hi: tuple
    n: tuple

    def __post_init__(self):
        lo = tuple(float(v) for v in np.atleast_1d(self.lo))
        hi = tuple(float(v) for v in np.atleast_1d(self.hi))
        n = tuple(int(v) for v in np.broadcast_to(np.atleast_1d(self.n), (len(lo),)))
        if len(lo) != len(hi):
            raise ValueError("lo and hi need the same length")
        if any(k < 3 for k in n):
            raise ValueError("need at least 3 interior nodes per axis")
        if any(b <= a for a, b in zip(lo, hi)):
            raise ValueError("need hi > lo on every axis")
        object.__setattr__(self, "lo", lo)
        object.__setattr__(self, "hi", hi)
        object.__setattr__(self, "n", n)

    @classmethod
    def from_step(cls, lo, hi, h):
        """Grid on ``[lo, hi]`` with spacing h; the box must be a multiple of h."""
        lo = np.atleast_1d(np.asarray(lo, dtype=float))
        hi = np.atleast_1d(np.asarray(hi, dtype=float)) * np.ones_like(lo)
        lo = lo * np.ones_like(hi)
        cells = (hi - lo) / h
        k = np.rint(cells).astype(int)
        if np.any(np.abs(cells - k) > 1e-9 * np.maximum(1.0, cells)):
            raise ValueError("box is not a multiple of the step")
        return cls(tuple(lo), tuple(hi), tuple(k - 1))

    @property
    def dim(self):
        return len(self.lo)

    @property
    def h(self):
        return np.array([(b - a) / (k + 1) for a, b, k in zip(self.lo, self.hi, self.n)])

    @property
    def size(self):
        return int(np.prod(self.n))

    def axes(self):
        return [a + h * np.arange(1, k + 1) for a, h, k in zip(self.lo, self.h, self.n)]

    def points(self):
        """Node coordinates in C order, shape ``(N, d)``."""
        mesh = np.meshgrid(*self.axes(), indexing="ij")
        return np.stack([m.ravel() for m in mesh], axis=-1)

    def shifted_points(self, half_steps):
        """Node coordinates moved by ``half_steps * h / 2`` (integer offsets).

        Built from integer indices, so a face or corner reached from two
        neighbouring nodes gets bit-identical coordinates.
        """
        idx = np.indices(self.n).reshape(self.dim, -1).T + 1
        m = 2 * idx + np.asarray(half_steps, dtype=int)
        return np.asarray(self.lo) + m * (0.5 * self.h)

    def cell_volume(self):
        return float(np.prod(self.h))


@dataclass(frozen=True, eq=False)
class GridOperator:
    """Assembled ``L_h`` (rows = nodes) with the mu_hat node weights."""

    spec: GridSpec
    matrix: sp.csr_matrix
    mu_hat_weights: np.ndarray
    direction: str
    stencil_kind: str = "conservative"
    killing: float = 0.0
    name: str = ""
    _cache: dict = field(default_factory=dict, repr=False, compare=False)

    @property
    def size(self):
        return self.matrix.shape[0]

    def points(self):
        return self.spec.points()

    def with_killing(self, c):
        """Same operator with ``-c`` added on the diagonal (mass is killed at rate c)."""
        M = (self.matrix - float(c) * sp.identity(self.size, format="csr")).tocsr()
        return GridOperator(self.spec, M, self.mu_hat_weights, self.direction, self.stencil_kind,
                            self.killing + float(c), self.name)


@dataclass
class ResolventSolve:
    alpha: float
    rhs: np.ndarray
    solution: np.ndarray
    iterations: int
    residual: float


# --- assembly ---------------------------------------------------------------------

def _neighbor_index(spec, offset):
    """Flat index of the node shifted by ``offset`` (grid steps) or -1 outside."""
    n = np.array(spec.n)
    idx = np.indices(spec.n).reshape(spec.dim, -1).T
    tgt = idx + np.asarray(offset)
    ok = np.all((tgt >= 0) & (tgt < n), axis=1)
    flat = np.ravel_multi_index(tuple(np.where(ok[:, None], tgt, 0).T), spec.n)
    return np.where(ok, flat, -1)


STENCILS = ("conservative", "central-upwind")


def discretize(cs: CoefficientSet, spec: GridSpec, direction="forward", stencil="conservative") -> GridOperator:
    """Monotone finite-difference generator on the interior nodes of ``spec``.

    ``conservative`` (default) writes the symmetric part in flux form
    ``(1/(2 psi rho)) div(rho A grad u)`` with rho A sampled on cell faces,
    and the B part as upwinded face fluxes of ``psi rho B``; when B carries a
    flux potential the fluxes are exactly divergence free. The mu_hat node
    weights are then exactly sub-invariant, so the L1(mu_hat) contraction
    holds to rounding.

    ``central-upwind`` uses central second differences for
    ``1/2 A_hat_ii d_ii`` and first-order upwinding for the whole drift
    beta + B; its mu_hat column sums are only O(h).

    Off-diagonal entries of A_hat use the seven-point stencil whose diagonal
    neighbours follow the sign of ``A_hat_ij`` (NonMonotoneStencil when an
    axial weight would turn negative). The dual direction uses -B.
    """
    if direction not in DIRECTIONS:
        raise ValueError(f"direction must be one of {DIRECTIONS}")
    if stencil not in STENCILS:
        raise ValueError(f"stencil must be one of {STENCILS}")
    if spec.dim != cs.dim:
        raise ValueError("grid and coefficient dimensions differ")
    d = spec.dim
    N = spec.size
    h = spec.h
    V = spec.cell_volume()
    X = cs.require_regular(spec.points())
    Ah = cs.a_hat(X)
    dens = cs.psi_values(X) * cs.rho(X)
    if not (np.all(np.isfinite(Ah)) and np.all(np.isfinite(dens))):
        raise NonFinite("non-finite coefficients on the grid")

    rows, cols, vals = [], [], []
    diag = np.zeros(N)
    all_nodes = np.arange(N)

    def couple(offset, w):
        nb = _neighbor_index(spec, offset)
        ok = (nb >= 0) & (w != 0)
        rows.append(all_nodes[ok])
        cols.append(nb[ok])
        vals.append(w[ok])

    # rates to the +e_i and -e_i neighbours
    plus = np.zeros((N, d))
    minus = np.zeros((N, d))
    if stencil == "conservative":
        for i in range(d):
            for sgn, out in ((1.0, plus), (-1.0, minus)):
                off = np.zeros(d, dtype=int)
                off[i] = int(sgn)
                Xf = spec.shifted_points(off)
                K = cs.rho(Xf) * cs.A(Xf)[:, i, i]
                out[:, i] = K / (2.0 * dens * h[i] ** 2)
    else:
        for i in range(d):
            plus[:, i] = minus[:, i] = 0.5 * Ah[:, i, i] / h[i] ** 2

    for i, j in itertools.combinations(range(d), 2):
        a = Ah[:, i, j]
        if not np.any(a):
            continue
        c = np.abs(a) / (2.0 * h[i] * h[j])
        for out in (plus, minus):
            out[:, i] -= c
            out[:, j] -= c
        diag -= 2.0 * c  # diagonal neighbours; the axial reductions enter below
        pos = a > 0
        for si, sj in ((1, 1), (-1, -1)):
            off = np.zeros(d, dtype=int)
            off[i], off[j] = si, sj
            couple(off, np.where(pos, c, 0.0))
            off[j] = -sj
            couple(off, np.where(pos, 0.0, c))
    if np.any(plus < 0) or np.any(minus < 0):
        k = int(np.argmin(np.minimum(plus, minus).min(axis=1)))
        raise NonMonotoneStencil(f"cross terms make an axial weight negative at node {X[k]}; "
                                 "refine or use a diagonal A_hat")
    diag -= plus.sum(axis=1) + minus.sum(axis=1)

    if stencil == "conservative":
        sign = 1.0 if direction == "forward" else -1.0
        for i in range(d):
            Fp = sign * _face_flux(cs, spec, i, +1)
            Fm = sign * _face_flux(cs, spec, i, -1)
            plus[:, i] += np.maximum(Fp, 0.0) / (dens * V)
            minus[:, i] += np.maximum(-Fm, 0.0) / (dens * V)
            diag -= (np.maximum(Fp, 0.0) + np.maximum(-Fm, 0.0)) / (dens * V)
    else:
        G = cs.drift(X, direction)
        if not np.all(np.isfinite(G)):
            raise NonFinite("non-finite drift on the grid")
        for i in range(d):
            up = np.maximum(G[:, i], 0.0) / h[i]
            down = np.maximum(-G[:, i], 0.0) / h[i]
            plus[:, i] += up
            minus[:, i] += down
            diag -= up + down

    for i in range(d):
        e = np.zeros(d, dtype=int)
        e[i] = 1
        couple(e, plus[:, i])
        couple(-e, minus[:, i])
    rows.append(all_nodes)
    cols.append(all_nodes)
    vals.append(diag)
    L = sp.coo_matrix((np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))),
                      shape=(N, N)).tocsr()
    L.sum_duplicates()
    if not np.all(np.isfinite(L.data)):
        raise NonFinite("assembled matrix has non-finite entries")
    return GridOperator(spec, L, dens * V, direction, stencil, name=cs.name)


def _face_flux(cs, spec, i, side):
    """Flux of ``psi rho B`` through the face of each node's cell at
    ``x + side h_i / 2 e_i``, in the +e_i direction."""
    d = spec.dim
    h = spec.h
    off = np.zeros(d, dtype=int)
    off[i] = side
    pot = getattr(cs.B, "flux_potential", None)
    if pot is None:
        Xf = spec.shifted_points(off)
        return cs.psi_values(Xf) * cs.rho(Xf) * cs.B(Xf)[:, i] * (np.prod(h) / h[i])
    # psi rho B_i = 1/2 sum_k d_k S_ki, integrated over the face
    F = np.zeros(spec.size)
    for k in range(d):
        if k == i:
            continue
        up = off.copy()
        dn = off.copy()
        up[k] += 1
        dn[k] -= 1
        Sa = pot(spec.shifted_points(up))[:, k, i]
        Sb = pot(spec.shifted_points(dn))[:, k, i]
        F += 0.5 * (Sa - Sb) * (np.prod(h) / (h[i] * h[k]))
    return F


def m_matrix_violations(op: GridOperator):
    """``(min off-diagonal, max diagonal, max row sum)``; an M-matrix row has
    off-diagonals >= 0, diagonal <= 0 and row sum <= 0."""
    L = op.matrix.tocoo()
    off = L.row != L.col
    min_off = float(L.data[off].min()) if np.any(off) else 0.0
    dg = op.matrix.diagonal()
    return min_off, float(dg.max()), float(np.asarray(op.matrix.sum(axis=1)).max())


def weighted_column_sums(op: GridOperator):
    """``sum_i w_i L_ij / w_j``: the discrete version of ``int L f dmu_hat``."""
    return (op.mu_hat_weights @ op.matrix) / op.mu_hat_weights


# --- solves -----------------------------------------------------------------------

def _system(op, alpha):
    return (alpha * sp.identity(op.size, format="csr") - op.matrix).tocsr()


def _factor(op, alpha, transpose=False):
    key = ("lu", float(alpha))
    if key not in op._cache:
        op._cache[key] = sla.lu_factor(_system(op, alpha).toarray(), check_finite=False)
    return op._cache[key]


def _preconditioner(op, alpha, transpose, A):
    key = ("ilu", float(alpha), bool(transpose))
    if key not in op._cache:
        ilu = spla.spilu(A.tocsc(), drop_tol=1e-5, fill_factor=10)
        op._cache[key] = spla.LinearOperator(A.shape, matvec=ilu.solve)
    return op._cache[key]


def solve(op: GridOperator, alpha, f, transpose=False) -> ResolventSolve:
    """Solve ``(alpha I - L_h) u = f`` (or the transposed system).

    Dense LU (cached per alpha) when N <= 4000, otherwise BiCGStab with an
    incomplete-LU preconditioner and restarts on the true residual. The residual is verified against
    ``1e-10 * |f|``; SolverDiverged otherwise.
    """
    if not alpha > 0:
        raise ValueError("alpha must be positive")
    f = np.asarray(f, dtype=float)
    if f.shape != (op.size,):
        raise ValueError(f"rhs has shape {f.shape}, expected ({op.size},)")
    if not np.all(np.isfinite(f)):
        raise NonFinite("rhs has non-finite entries")
    A = _system(op, alpha)
    if transpose:
        A = A.T.tocsr()
    nrm = np.linalg.norm(f)
    if nrm == 0.0:
        return ResolventSolve(alpha, f, np.zeros_like(f), 0, 0.0)
    if op.size <= DENSE_MAX:
        u = sla.lu_solve(_factor(op, alpha), f, trans=1 if transpose else 0, check_finite=False)
        iters = 0
    else:
        M = _preconditioner(op, alpha, transpose, A)
        count = [0]

        def cb(_):
            count[0] += 1

        u = np.zeros_like(f)
        r = f.copy()
        for _ in range(REFINEMENTS):
            # restart on the true residual; the recursive one drifts
            du, info = spla.bicgstab(A, r, rtol=SOLVE_RTOL, atol=0.0, maxiter=10 * op.size, M=M, callback=cb)
            if info < 0 and not u.any():
                raise SolverDiverged(f"BiCGStab breakdown (info={info})", count[0], None)
            if info < 0:
                break  # the residual check below decides
            u += du
            r = f - A @ u
            if np.linalg.norm(r) <= 0.01 * RESIDUAL_TOL * nrm:
                break
        iters = count[0]
    res = float(np.linalg.norm(A @ u - f))
    if not np.isfinite(res) or res > RESIDUAL_TOL * nrm:
        raise SolverDiverged(f"residual {res:.3e} exceeds {RESIDUAL_TOL:g} * |rhs|", iters, res)
    return ResolventSolve(alpha, f, u, iters, res)


def resolvent(op: GridOperator, alpha, f) -> np.ndarray:
    """``G_alpha f = (alpha I - L_h)^{-1} f``."""
    return solve(op, alpha, f).solution


def weighted_adjoint_resolvent(op: GridOperator, alpha, g) -> np.ndarray:
    """Resolvent of the mu_hat-adjoint ``D^{-1} L_h^T D``: ``D^{-1} (alpha I - L_h)^{-T} D g``."""
    w = op.mu_hat_weights
    return solve(op, alpha, w * np.asarray(g, dtype=float), transpose=True).solution / w


def semigroup_step(op: GridOperator, t, n_steps, f) -> np.ndarray:
    """Implicit Euler approximation ``(alpha G_alpha)^n f`` of ``T_t f`` with alpha = n/t."""
    if not (t > 0 and n_steps >= 1):
        raise ValueError("need t > 0 and n_steps >= 1")
    alpha = n_steps / t
    u = np.asarray(f, dtype=float)
    for _ in range(int(n_steps)):
        u = alpha * resolvent(op, alpha, u)
    return u


# --- structural checks ------------------------------------------------------------

def _smooth_random(spec, rng, n_modes=3):
    """Random combination of low sine modes vanishing on the boundary, in [0, 1]."""
    X = spec.points()
    lo = np.array(spec.lo)
    L = np.array(spec.hi) - lo
    u = np.zeros(len(X))
    for _ in range(n_modes):
        k = rng.integers(1, 4, size=spec.dim)
        u += rng.normal() * np.prod(np.sin(np.pi * k * (X - lo) / L), axis=1)
    u -= u.min()
    return u / max(u.max(), 1e-300)


def random_unit_data(op, trials, seed=0):
    """Test data with values in [0, 1]: constant one, zero, and random fields."""
    rng = np.random.default_rng(seed)
    out = [np.ones(op.size), np.zeros(op.size)]
    for k in range(trials):
        out.append(rng.uniform(0.0, 1.0, op.size) if k % 2 == 0 else _smooth_random(op.spec, rng))
    return out


def check_submarkov(op: GridOperator, alpha, trials=20, data=None, seed=0):
    """``0 <= alpha G_alpha f <= 1`` whenever ``0 <= f <= 1``."""
    fs = random_unit_data(op, trials, seed) if data is None else [np.asarray(f, dtype=float) for f in data]
    worst = 0.0
    for f in fs:
        if np.any(f < 0) or np.any(f > 1):
            raise ValueError("sub-Markov check needs data with 0 <= f <= 1")
        u = alpha * resolvent(op, alpha, f)
        worst = max(worst, float(np.max(u - 1.0, initial=0.0)), float(np.max(-u, initial=0.0)))
    return ReportEntry("submarkov", worst, SUBMARKOV_TOL,
                       f"largest violation of 0 <= alpha G f <= 1 over {len(fs)} data vectors, alpha = {alpha:g}")


def check_l1_contraction(op: GridOperator, alpha, trials=20, data=None, seed=1):
    """``sum w alpha G_alpha f <= sum w f`` for f >= 0 (relative excess reported)."""
    fs = random_unit_data(op, trials, seed)[1:] if data is None else [np.asarray(f, dtype=float) for f in data]
    w = op.mu_hat_weights
    worst = 0.0
    for f in fs:
        if np.any(f < 0):
            raise ValueError("contraction check needs f >= 0")
        mass = float(w @ f)
        if mass == 0.0:
            continue
        out = float(w @ (alpha * resolvent(op, alpha, f)))
        worst = max(worst, (out - mass) / mass)
    return ReportEntry("l1_contraction", worst, CONTRACTION_TOL,
                       f"max relative excess of int alpha G f dmu_hat over int f dmu_hat, {len(fs)} vectors")


def resolvent_equation_residual(op: GridOperator, alpha, beta, f):
    """``|(beta - alpha) G_a G_b f - (G_a f - G_b f)| / |G_a f|`` in the weighted L1 norm."""
    w = op.mu_hat_weights
    ga = resolvent(op, alpha, f)
    gb = resolvent(op, beta, f)
    gab = resolvent(op, alpha, gb)
    num = float(w @ np.abs((beta - alpha) * gab - (ga - gb)))
    den = float(w @ np.abs(ga))
    return num / den if den > 0 else num


def check_resolvent_equation(op: GridOperator, alpha, beta, trials=5, seed=2):
    fs = random_unit_data(op, trials, seed)[2:]
    worst = max(resolvent_equation_residual(op, alpha, beta, f) for f in fs)
    return ReportEntry("resolvent_equation", worst, RESOLVENT_EQ_TOL,
                       f"relative weighted L1 residual of the resolvent equation, alpha = {alpha:g}, beta = {beta:g}")


def embedding(spec_small: GridSpec, spec_large: GridSpec):
    """Flat indices of the small grid's nodes inside the large grid.

    Requires identical steps and box corners on the large grid's lattice.
    """
    hs, hl = spec_small.h, spec_large.h
    if spec_small.dim != spec_large.dim or not np.allclose(hs, hl, rtol=1e-12, atol=0.0):
        raise ValueError("nested grids need the same step")
    shift = (np.array(spec_small.lo) - np.array(spec_large.lo)) / hl
    k = np.rint(shift).astype(int)
    if np.any(np.abs(shift - k) > 1e-9) or np.any(k < 0):
        raise ValueError("small grid is not aligned with the large grid")
    if np.any(k + np.array(spec_small.n) > np.array(spec_large.n)):
        raise ValueError("small box is not inside the large box")
    idx = np.indices(spec_small.n).reshape(spec_small.dim, -1).T + k
    return np.ravel_multi_index(tuple(idx.T), spec_large.n)


def check_nested_monotone(cs: CoefficientSet, spec_small, spec_large, alpha, f, direction="forward",
                          stencil="conservative"):
    """``G^{V1}_alpha f <= G^{V2}_alpha f`` on shared nodes for V1 inside V2.

    ``f`` is a vector on the small grid, a stack of such vectors, or a
    callable evaluated at the small-grid nodes; it is extended by zero.
    """
    emb = embedding(spec_small, spec_large)
    op_s = discretize(cs, spec_small, direction, stencil)
    op_l = discretize(cs, spec_large, direction, stencil)
    F = f(spec_small.points()) if callable(f) else np.asarray(f, dtype=float)
    F = np.atleast_2d(F)
    if np.any(F < 0):
        raise ValueError("nested monotonicity needs f >= 0")
    worst = 0.0
    for row in F:
        big = np.zeros(op_l.size)
        big[emb] = row
        us = resolvent(op_s, alpha, row)
        ul = resolvent(op_l, alpha, big)[emb]
        worst = max(worst, float(np.max(us - ul)))
    return ReportEntry("nested_monotone", worst, NESTED_TOL,
                       f"max of G^small f - G^large f on shared nodes over {len(F)} data vectors")


def global_resolvent(cs: CoefficientSet, spec_family, alpha, f, direction="forward", tol=GLOBAL_TOL,
                     stencil="conservative"):
    """Increasing-box limit of ``G^{V_n}_alpha f`` on the smallest grid.

    ``f`` is a callable on points (extended by its values on each grid). The
    step is the same on all grids, so the profile isolates the effect of the
    domain growth. Returns ``(limit, profile)``; NotConverged when the last
    mu_hat-weighted L1 increment exceeds ``tol``.
    """
    specs = list(spec_family)
    base = specs[0]
    prev = None
    profile = {"l1_increment": [], "sup_increment": [], "boxes": []}
    w0 = None
    for spec in specs:
        emb = embedding(base, spec)
        op = discretize(cs, spec, direction, stencil)
        u = resolvent(op, alpha, f(spec.points()))[emb]
        if w0 is None:
            w0 = op.mu_hat_weights[emb]
        if prev is not None:
            profile["l1_increment"].append(float(w0 @ np.abs(u - prev)))
            profile["sup_increment"].append(float(np.max(np.abs(u - prev))))
        profile["boxes"].append((spec.lo, spec.hi))
        prev = u
    if not profile["l1_increment"] or profile["l1_increment"][-1] > tol:
        raise NotConverged("global resolvent increments did not fall below tolerance", profile)
    return prev, profile


def smooth_interior_bump(spec: GridSpec, frac=0.35):
    """Smooth bump centred in the box with radius ``frac`` of the shortest side."""
    X = spec.points()
    c = 0.5 * (np.array(spec.lo) + np.array(spec.hi))
    R = frac * float(np.min(np.array(spec.hi) - np.array(spec.lo)))
    s = np.sum((X - c) ** 2, axis=1) / R**2
    return np.where(s < 1.0, np.exp(-1.0 / np.where(s < 1.0, 1.0 - s, 1.0)), 0.0)


def adjoint_consistency(cs: CoefficientSet, spec: GridSpec, g=None, stencil="central-upwind"):
    """mu_hat-weighted mean of ``|D^{-1} L_h^T D g - L'_h g|`` for a smooth
    interior g.

    O(h) on the central-upwind stencil; zero up to rounding on the
    conservative one, whose dual is the exact weighted adjoint. The sup norm
    does not converge: the transposed upwind drift is off by O(1) on the
    nodes where the drift changes sign, a set of weight O(h).
    """
    op = discretize(cs, spec, "forward", stencil)
    op_d = discretize(cs, spec, "dual", stencil)
    return _adjoint_gap(op, op_d, smooth_interior_bump(spec) if g is None else g)


def _adjoint_gap(op, op_d, g):
    w = op.mu_hat_weights
    gap = (op.matrix.T @ (w * g)) / w - op_d.matrix @ g
    return float(w @ np.abs(gap)) / float(w.sum())


def check_duality(cs: CoefficientSet, spec: GridSpec, alpha, trials=5, seed=3, stencil="conservative"):
    """mu_hat-duality of forward and co-resolvents.

    metric_1: ``|<alpha G u, v>_w - <u, alpha G' v>_w|`` with G' from the
    independently discretized dual generator (first order in h);
    metric_2: the same pairing against the exact weighted adjoint
    ``D^{-1} (alpha I - L_h)^T D`` (algebraic identity, pass criterion);
    metric_3: weighted mean of ``|D^{-1} L_h^T D g - L'_h g|`` on a smooth
    interior g (see adjoint_consistency).

    On the conservative stencil metrics 1 and 3 vanish up to rounding too.
    """
    op = discretize(cs, spec, "forward", stencil)
    op_d = discretize(cs, spec, "dual", stencil)
    w = op.mu_hat_weights
    rng = np.random.default_rng(seed)
    m1 = m2 = 0.0
    for _ in range(trials):
        u = _smooth_random(spec, rng)
        v = _smooth_random(spec, rng)
        scale = float(w @ np.abs(u)) * float(np.max(np.abs(v)))
        Gu = alpha * resolvent(op, alpha, u)
        left = float(w @ (Gu * v))
        right_dual = float(w @ (u * alpha * resolvent(op_d, alpha, v)))
        right_adj = float(w @ (u * alpha * weighted_adjoint_resolvent(op, alpha, v)))
        m1 = max(m1, abs(left - right_dual) / scale)
        m2 = max(m2, abs(left - right_adj) / scale)
    m3 = _adjoint_gap(op, op_d, smooth_interior_bump(spec))
    h = float(np.max(spec.h))
    return ReportEntry("duality", m2, ADJOINT_TOL,
                       f"exact weighted adjoint {m2:.3e}; forward vs independent dual resolvent {m1:.3e} "
                       f"(h = {h:g}, {stencil}); adjoint vs dual generator on a smooth bump {m3:.3e}",
                       data={"metric1": m1, "metric2": m2, "metric3": m3, "h": h, "stencil": stencil})


def invariance_probe_chi(cs: CoefficientSet, spec_family, alpha, window=None, killing=0.0,
                         stencil="conservative"):
    """Window norms of ``chi_n = 1 - alpha G'_alpha 1`` on increasing boxes.

    G' is the dual resolvent on each box (with an optional planted killing
    rate). The norm is ``sum_{x_i in window} w_i |chi_n(x_i)|`` with the
    unnormalized mu_hat node weights. Returns ``(norms, chis)``.
    """
    norms, chis = [], []
    for spec in spec_family:
        op = discretize(cs, spec, "dual", stencil)
        if killing:
            op = op.with_killing(killing)
        chi = 1.0 - alpha * resolvent(op, alpha, np.ones(op.size))
        X = spec.points()
        if window is None:
            inside = np.ones(len(X), dtype=bool)
        else:
            lo, hi = window
            inside = np.all((X >= lo) & (X <= hi), axis=1)
        norms.append(float(op.mu_hat_weights[inside] @ np.abs(chi[inside])))
        chis.append(chi)
    return norms, chis


def check_invariance_probe(cs, spec_family, alpha, window, final_tol=0.05, killing=0.0,
                           stencil="conservative"):
    norms, _ = invariance_probe_chi(cs, spec_family, alpha, window, killing, stencil)
    decreasing = all(b < a for a, b in zip(norms, norms[1:]))
    metric = norms[-1] if decreasing else float("inf")
    return ReportEntry("invariance_probe", metric, final_tol,
                       f"window norms of chi_n: {', '.join(f'{v:.3e}' for v in norms)}"
                       + ("" if decreasing else " (not strictly decreasing)"),
                       data={"norms": norms})


# --- dumps ------------------------------------------------------------------------

def dump_matrix(op: GridOperator, path):
    """Coordinate text format: ``row col value`` per line, 17 significant digits."""
    L = op.matrix.tocoo()
    with open(path, "w") as fh:
        fh.write(f"% {op.size} {op.size} {L.nnz}\n")
        for r, c, v in zip(L.row, L.col, L.data):
            fh.write(f"{r} {c} {v:.17g}\n")


def dump_solution(op: GridOperator, u, path, header="value"):
    X = op.points()
    cols = [f"x{i + 1}" for i in range(op.spec.dim)] + [header]
    data = np.column_stack([X, u])
    np.savetxt(path, data, delimiter=",", header=",".join(cols), comments="", fmt="%.17g")
