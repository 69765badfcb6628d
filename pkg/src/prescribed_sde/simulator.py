"""Tamed Euler-Maruyama paths of the forward process and the co-process, and
the statistical tests run on them.

Every path owns two Philox streams derived from ``SeedSequence(seed,
spawn_key=(p,))``: one for its initial state and one for its Brownian
increments. Path p therefore has the same trajectory whatever the ensemble
size or the block layout used to draw the increments.
"""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field

import numpy as np
from scipy import stats

from .coefficients import DIRECTIONS, CoefficientSet, generator_apply
from .quadrature import integrate

R_EXPLODE = 1e6
TAMING_THRESHOLD = 0.01  # dt |G| above this counts as a taming activation
DRAW_BUDGET = 4_000_000  # normals drawn per block across all paths
KS_3SIGMA = 1.82  # c(alpha) of the two-sample KS null at alpha = 0.0027


# --- configuration ----------------------------------------------------------------

class InitialLaw:
    """Law of X_0, sampled path by path from the path's own stream."""

    def sample(self, rng, dim):  # pragma: no cover - interface
        raise NotImplementedError


@dataclass(frozen=True)
class PointLaw(InitialLaw):
    x0: tuple

    def sample(self, rng, dim):
        return np.asarray(self.x0, dtype=float), 1


@dataclass(frozen=True)
class RejectionLaw(InitialLaw):
    """Rejection sampling of an unnormalized density against an envelope.

    ``density`` is batched; ``envelope`` provides ``sample(rng, n)``, ``pdf``
    and ``bound`` with ``density <= bound * pdf``. Proposals come in small
    batches; the first accepted one is used.
    """

    density: object
    envelope: object
    batch: int = 16
    max_rounds: int = 10_000

    def sample(self, rng, dim):
        tries = 0
        for _ in range(self.max_rounds):
            y = self.envelope.sample(rng, self.batch)
            ratio = self.density(y) / (self.envelope.bound * self.envelope.pdf(y))
            if np.any(ratio > 1.0 + 1e-9):
                raise ValueError(f"envelope bound violated (ratio {ratio.max():.6f})")
            u = rng.random(self.batch)
            ok = np.flatnonzero(u < ratio)
            if ok.size:
                tries += int(ok[0]) + 1
                return y[ok[0]], tries
            tries += self.batch
        raise RuntimeError("rejection sampler made no acceptance; check the envelope")


def stationary_law(scenario) -> RejectionLaw:
    """mu_hat / Z for a scenario that declares an envelope."""
    if scenario.envelope is None:
        raise ValueError(f"{scenario.name} declares no sampling envelope (infinite mu_hat?)")
    return RejectionLaw(scenario.cs.density, scenario.envelope)


@dataclass(frozen=True)
class SimConfig:
    """Run parameters.

    ``initial`` is a point (sequence of floats) or an InitialLaw. States are
    stored every ``record_every`` steps.
    """

    dt: float
    T: float
    n_paths: int
    seed: int = 0
    taming: bool = True
    direction: str = "forward"
    initial: object = None
    record_every: int = 1
    r_explode: float = R_EXPLODE

    def __post_init__(self):
        if not self.dt > 0:
            raise ValueError("dt must be positive")
        if self.dt > self.T:
            raise ValueError("dt must not exceed the horizon T")
        if int(self.n_paths) < 1:
            raise ValueError("n_paths must be at least 1")
        if self.direction not in DIRECTIONS:
            raise ValueError(f"direction must be one of {DIRECTIONS}")
        if int(self.record_every) < 1:
            raise ValueError("record_every must be >= 1")
        n = self.T / self.dt
        if abs(n - round(n)) > 1e-8 * max(1.0, n):
            raise ValueError("T must be an integer multiple of dt")

    @property
    def n_steps(self):
        return int(round(self.T / self.dt))

    def law(self, dim):
        if isinstance(self.initial, InitialLaw):
            return self.initial
        x0 = np.zeros(dim) if self.initial is None else np.asarray(self.initial, dtype=float).reshape(-1)
        if x0.size != dim:
            raise ValueError(f"initial point has {x0.size} coordinates, expected {dim}")
        return PointLaw(tuple(x0))


def path_streams(seed, p):
    """``(initial, increments)`` generators of path p."""
    init_ss, inc_ss = np.random.SeedSequence(int(seed), spawn_key=(int(p),)).spawn(2)
    return np.random.Generator(np.random.Philox(init_ss)), np.random.Generator(np.random.Philox(inc_ss))


# --- ensembles ---------------------------------------------------------------------

@dataclass
class PathEnsemble:
    """Recorded states ``(n_paths, n_times, dim)`` on the shared grid ``times``."""

    times: np.ndarray
    states: np.ndarray
    taming_activations: np.ndarray
    exploded: np.ndarray
    singular_hits: np.ndarray
    dt: float
    direction: str = "forward"
    proposals: int = 0
    meta: dict = field(default_factory=dict)

    @property
    def n_paths(self):
        return self.states.shape[0]

    @property
    def dim(self):
        return self.states.shape[2]

    @property
    def acceptance_rate(self):
        return self.n_paths / self.proposals if self.proposals else float("nan")

    def index(self, t):
        """Index of the recorded time equal to t (to 1e-9 relative)."""
        k = int(np.argmin(np.abs(self.times - t)))
        if abs(self.times[k] - t) > 1e-9 * max(1.0, abs(t)):
            raise ValueError(f"t = {t} is not on the recorded grid")
        return k

    def at(self, t, alive_only=True):
        X = self.states[:, self.index(t)]
        return X[~self.exploded] if alive_only else X

    def alive(self):
        return ~self.exploded

    def summary(self):
        XT = self.states[~self.exploded, -1]
        return {
            "n_paths": int(self.n_paths),
            "n_times": int(len(self.times)),
            "dt": float(self.dt),
            "direction": self.direction,
            "exploded": int(self.exploded.sum()),
            "taming_activations": int(self.taming_activations.sum()),
            "singular_hits": int(self.singular_hits.sum()),
            "acceptance_rate": float(self.acceptance_rate),
            "mean_final": XT.mean(axis=0).tolist() if len(XT) else None,
            "var_final": XT.var(axis=0, ddof=1).tolist() if len(XT) > 1 else None,
        }

    def to_csv(self, path, max_paths=None):
        """Long format: ``path_id,t,x_1..x_d``."""
        n = self.n_paths if max_paths is None else min(self.n_paths, int(max_paths))
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["path_id", "t"] + [f"x_{i + 1}" for i in range(self.dim)])
            for p in range(n):
                for t, x in zip(self.times, self.states[p]):
                    w.writerow([p, repr(float(t))] + [repr(float(v)) for v in x])


def _initial_states(cfg, dim):
    law = cfg.law(dim)
    X = np.empty((cfg.n_paths, dim))
    proposals = 0
    for p in range(cfg.n_paths):
        init_rng, _ = path_streams(cfg.seed, p)
        X[p], k = law.sample(init_rng, dim)
        proposals += k
    return X, proposals


def _nudge(cs, X, hits):
    """Move states sitting exactly on a declared singular point by one ulp."""
    if not cs.singular_points:
        return X
    bad = cs.is_singular(X)
    if np.any(bad):
        X = X.copy()
        X[bad] = np.nextafter(X[bad], np.inf)
        hits[bad] += 1
    return X


def simulate(cs: CoefficientSet, cfg: SimConfig) -> PathEnsemble:
    """Tamed Euler-Maruyama paths.

    ``X_{k+1} = X_k + sigma_hat(X_k) dW_k + G(X_k) dt / (1 + dt |G(X_k)|)``
    with G the forward or dual drift. Paths leaving ``|x| <= r_explode`` (or
    turning non-finite) are frozen at their last state and flagged. Initial
    points on a declared singular point are refused.
    """
    d = cs.dim
    n, n_steps, dt = int(cfg.n_paths), cfg.n_steps, float(cfg.dt)
    X, proposals = _initial_states(cfg, d)
    if np.any(cs.is_singular(X)):
        raise ValueError("initial point lies on a declared singular point; the law there is undefined")
    streams = [path_streams(cfg.seed, p)[1] for p in range(n)]
    stride = int(cfg.record_every)
    rec_idx = list(range(0, n_steps + 1, stride))
    if rec_idx[-1] != n_steps:
        rec_idx.append(n_steps)
    states = np.empty((n, len(rec_idx), d))
    states[:, 0] = X
    times = np.array(rec_idx, dtype=float) * dt
    activations = np.zeros(n, dtype=np.int64)
    hits = np.zeros(n, dtype=np.int64)
    frozen = np.zeros(n, dtype=bool)
    block = max(1, DRAW_BUDGET // (n * d))
    sq = math.sqrt(dt)
    r = 1
    step = 0
    while step < n_steps:
        k_blk = min(block, n_steps - step)
        dW = np.stack([g.standard_normal((k_blk, d)) for g in streams], axis=1) * sq
        for k in range(k_blk):
            live = np.flatnonzero(~frozen)
            if live.size:
                hit = np.zeros(live.size, dtype=np.int64)
                Xa = _nudge(cs, X[live], hit)
                hits[live] += hit
                G = cs.drift(Xa, cfg.direction)
                S = cs.dispersion(Xa)
                if cfg.taming:
                    gn = np.linalg.norm(G, axis=1)
                    activations[live] += dt * gn > TAMING_THRESHOLD
                    G = G / (1.0 + dt * gn)[:, None]
                Xn = Xa + np.einsum("pij,pj->pi", S, dW[k, live]) + G * dt
                bad = ~np.all(np.isfinite(Xn), axis=1) | (np.linalg.norm(Xn, axis=1) > cfg.r_explode)
                if np.any(bad):
                    Xn[bad] = Xa[bad]
                    frozen[live[bad]] = True
                X[live] = Xn
            step += 1
            if r < len(rec_idx) and step == rec_idx[r]:
                states[:, r] = X
                r += 1
    return PathEnsemble(times, states, activations, frozen, hits, dt, cfg.direction, proposals,
                        meta={"seed": int(cfg.seed), "T": float(cfg.T), "taming": bool(cfg.taming),
                              "coefficients": cs.name})


def exact_ou_ensemble(dim, cfg: SimConfig) -> PathEnsemble:
    """Exact transitions of ``dX = -X dt + dW``: ``X_{t+s} = e^{-s} X_t +
    sqrt((1 - e^{-2s}) / 2) Z`` on the recorded grid of ``cfg``."""
    n = int(cfg.n_paths)
    X, proposals = _initial_states(cfg, dim)
    stride = int(cfg.record_every)
    rec_idx = list(range(0, cfg.n_steps + 1, stride))
    if rec_idx[-1] != cfg.n_steps:
        rec_idx.append(cfg.n_steps)
    times = np.array(rec_idx, dtype=float) * cfg.dt
    streams = [path_streams(cfg.seed, p)[1] for p in range(n)]
    Z = np.stack([g.standard_normal((len(times) - 1, dim)) for g in streams], axis=0)
    states = np.empty((n, len(times), dim))
    states[:, 0] = X
    for k, s in enumerate(np.diff(times)):
        X = math.exp(-s) * X + math.sqrt(0.5 * (1.0 - math.exp(-2.0 * s))) * Z[:, k]
        states[:, k + 1] = X
    zeros = np.zeros(n, dtype=np.int64)
    return PathEnsemble(times, states, zeros, np.zeros(n, dtype=bool), zeros.copy(), cfg.dt, "forward",
                        proposals, meta={"seed": int(cfg.seed), "T": float(cfg.T), "exact": "ou"})


# --- statistical tests ---------------------------------------------------------------

@dataclass
class StatTestResult:
    """``passed`` iff ``|statistic| <= threshold``."""

    name: str
    statistic: float
    standard_error: float
    threshold: float
    n_effective: int
    details: str = ""
    data: dict = field(default_factory=dict)

    @property
    def passed(self):
        return bool(abs(self.statistic) <= self.threshold)

    def to_entry(self):
        from .report import ReportEntry

        return ReportEntry(self.name, abs(self.statistic), self.threshold, self.details,
                           data={"standard_error": self.standard_error, "n_effective": self.n_effective,
                                 **self.data})


def _z(mean, se):
    if se > 0:
        return mean / se
    return 0.0 if mean == 0 else math.copysign(math.inf, mean)


EVAL_CHUNK = 200_000


def _along_paths(ens, fn, k_max):
    """``fn`` evaluated on the alive paths at recorded times ``0..k_max``."""
    X = ens.states[~ens.exploded, : k_max + 1]
    flat = X.reshape(-1, ens.dim)
    out = np.concatenate([fn(flat[i:i + EVAL_CHUNK]) for i in range(0, len(flat), EVAL_CHUNK)]) \
        if len(flat) else np.zeros(0)
    return out.reshape(X.shape[:2])


def _trapezoid(values, times):
    dt = np.diff(times)
    return np.concatenate([np.zeros((values.shape[0], 1)),
                           np.cumsum(0.5 * (values[:, 1:] + values[:, :-1]) * dt, axis=1)], axis=1)


def martingale_values(ens, cs, u, t_max):
    """``M_t^u = u(X_t) - u(X_0) - int_0^t Lu(X_s) ds`` on the recorded grid up
    to ``t_max`` (trapezoid rule), alive paths only."""
    k_max = ens.index(t_max)
    U = _along_paths(ens, u, k_max)
    LU = _along_paths(ens, lambda x: generator_apply(cs, u, x, ens.direction), k_max)
    return U - U[:, :1] - _trapezoid(LU, ens.times[: k_max + 1])


def martingale_test(ens: PathEnsemble, cs, u, t_checkpoints, threshold=3.0) -> StatTestResult:
    """Mean of M_t^u in standard errors at each checkpoint; the worst one is
    the statistic."""
    t_checkpoints = sorted(float(t) for t in t_checkpoints)
    M = martingale_values(ens, cs, u, t_checkpoints[-1])
    zs, ses = [], []
    for t in t_checkpoints:
        m = M[:, ens.index(t)]
        se = float(m.std(ddof=1) / math.sqrt(len(m))) if len(m) > 1 else 0.0
        zs.append(_z(float(m.mean()), se))
        ses.append(se)
    k = int(np.argmax(np.abs(zs)))
    return StatTestResult(f"martingale[{getattr(u, 'name', 'u')}]", zs[k], ses[k], threshold, M.shape[0],
                          "mean(M_t)/SE at t = " + ", ".join(f"{t:g}: {z:+.2f}" for t, z in zip(t_checkpoints, zs)),
                          data={"checkpoints": t_checkpoints, "z": zs})


def quadratic_variation_test(ens: PathEnsemble, cs, u, t, threshold=0.05) -> StatTestResult:
    """Realized ``sum (Delta M^u)^2`` against ``int <A_hat grad u, grad u>(X_s) ds``.

    The statistic is the relative discrepancy of the path means. Resolution
    is that of the recorded grid, so record every step for a sharp test.
    """
    M = martingale_values(ens, cs, u, t)
    realized = np.sum(np.diff(M, axis=1) ** 2, axis=1)

    def energy(x):
        g = u.gradient(x)
        return np.einsum("pi,pij,pj->p", g, cs.a_hat(x), g)

    k = ens.index(t)
    predicted = _trapezoid(_along_paths(ens, energy, k), ens.times[: k + 1])[:, -1]
    mp = float(predicted.mean())
    diff = realized - predicted
    se = float(diff.std(ddof=1) / math.sqrt(len(diff))) if len(diff) > 1 else 0.0
    if mp == 0.0:
        stat = 0.0 if float(np.abs(realized).max(initial=0.0)) == 0.0 else math.inf
    else:
        stat = float(diff.mean()) / mp
    return StatTestResult(f"quadratic_variation[{getattr(u, 'name', 'u')}]", stat,
                          se / mp if mp else 0.0, threshold, len(diff),
                          f"realized {realized.mean():.6g} vs predicted {mp:.6g} at t = {t:g}",
                          data={"realized": float(realized.mean()), "predicted": mp})


def marginal_bin_probabilities(measure, coord, edges, half_width, n=None):
    """``mu_hat/Z`` mass of each bin ``[edges[k], edges[k+1]]`` in coordinate
    ``coord``, the other coordinates integrated over ``[-half_width, half_width]``.
    Outer bins run to +-infinity through the normalization."""
    d = measure.density.dim
    probs = []
    singular = measure.density.singular_points
    for a, b in zip(edges[:-1], edges[1:]):
        lo = np.full(d, -half_width)
        hi = np.full(d, half_width)
        lo[coord], hi[coord] = a, b
        probs.append(float(integrate(measure.normalized, lo, hi, n, singular)))
    return np.array(probs)


def empirical_invariance_test(ens: PathEnsemble, measure, t_check, bins=40, half_width=None,
                              n_quad=None, sigmas=3.0) -> StatTestResult:
    """Per-coordinate total variation between the histogram of X_t and the
    marginals of ``mu_hat/Z``.

    Bins split ``[-half_width, half_width]`` evenly plus two tail bins. The
    budget per coordinate is ``1/2 sum_k sqrt(p_k (1 - p_k) / n)``; the
    statistic is the worst TV/budget ratio and passes at ``sigmas``.
    """
    X = ens.at(t_check)
    n = len(X)
    if half_width is None:
        half_width = float(max(4.0, np.quantile(np.abs(X), 0.999)))
    edges = np.linspace(-half_width, half_width, int(bins) + 1)
    ratios, tvs, budgets = [], [], []
    for i in range(ens.dim):
        inner = marginal_bin_probabilities(measure, i, edges, half_width, n_quad)
        # mass beyond the box in the other coordinates is spread evenly; it is
        # below 1e-6 for the default half width on the built-in scenarios
        tail = max(0.0, 1.0 - inner.sum())
        below = float(np.mean(X[:, i] < edges[0]))
        above = float(np.mean(X[:, i] > edges[-1]))
        counts, _ = np.histogram(X[:, i], edges)
        emp = np.concatenate([[below], counts / n, [above]])
        p = np.concatenate([[0.5 * tail], inner, [0.5 * tail]])
        tv = 0.5 * float(np.abs(emp - p).sum())
        budget = 0.5 * float(np.sqrt(p * (1.0 - p) / n).sum())
        tvs.append(tv)
        budgets.append(budget)
        ratios.append(tv / budget if budget > 0 else (0.0 if tv == 0 else math.inf))
    k = int(np.argmax(ratios))
    return StatTestResult("empirical_invariance", ratios[k], budgets[k], sigmas, n,
                          "TV/budget per coordinate: " + ", ".join(f"{r:.2f}" for r in ratios)
                          + f" at t = {t_check:g}, {bins} bins",
                          data={"tv": tvs, "budget": budgets})


def ks_threshold(n, m, c=KS_3SIGMA):
    return c * math.sqrt((n + m) / (n * m))


def time_reversal_test(fwd: PathEnsemble, dual: PathEnsemble, T, t_marks) -> StatTestResult:
    """Two-sample KS distance per coordinate between ``X^fwd_{T-t}`` and
    ``X^dual_t`` for each mark t; the statistic is the worst KS/threshold."""
    worst, rows = 0.0, []
    for t in t_marks:
        a = fwd.at(T - t)
        b = dual.at(t)
        thr = ks_threshold(len(a), len(b))
        for i in range(fwd.dim):
            ks = float(stats.ks_2samp(a[:, i], b[:, i]).statistic)
            rows.append((t, i, ks, thr))
            worst = max(worst, ks / thr)
    return StatTestResult("time_reversal", worst, float("nan"), 1.0, min(len(fwd.at(0)), len(dual.at(0))),
                          "KS/threshold: " + ", ".join(f"t={t:g} x{i + 1}: {ks / thr:.2f}" for t, i, ks, thr in rows),
                          data={"ks": [r[2] for r in rows], "thresholds": [r[3] for r in rows]})


def _pair_mean(ens, f, g, t1, t2):
    v = f(ens.at(t1)) * g(ens.at(t2))
    return float(v.mean()), float(v.std(ddof=1) / math.sqrt(len(v)))


def two_time_diagnostic(fwd: PathEnsemble, dual: PathEnsemble, f, g, t, s, sigmas=3.0):
    """``E[f(X_t) g(X_{t+s})]`` three ways.

    forward: on the forward ensemble; reversed: the same functional read
    backwards in time on the forward ensemble (``f`` at ``T - t``, ``g`` at
    ``T - t - s``); dual: on the co-process ensemble. Returns
    ``(separation, agreement)``: separation passes when forward and reversed
    differ by more than ``sigmas`` pooled SE, agreement when reversed and dual
    are within it.
    """
    T = float(fwd.times[-1])
    m_f, se_f = _pair_mean(fwd, f, g, t, t + s)
    m_r, se_r = _pair_mean(fwd, f, g, T - t, T - t - s)
    m_d, se_d = _pair_mean(dual, f, g, t, t + s)
    sep_se = math.hypot(se_f, se_r)
    agr_se = math.hypot(se_r, se_d)
    z_sep = _z(m_f - m_r, sep_se)
    z_agr = _z(m_r - m_d, agr_se)
    info = f"forward {m_f:+.4f}, reversed {m_r:+.4f}, dual {m_d:+.4f}"
    data = {"forward": m_f, "reversed": m_r, "dual": m_d}
    # separation passes when |z| exceeds sigmas, so report its inverse
    separation = StatTestResult("two_time_separation", 1.0 / abs(z_sep) if z_sep else math.inf, sep_se,
                                1.0 / sigmas, fwd.n_paths, info + f"; z(forward - reversed) = {z_sep:+.2f}", data)
    agreement = StatTestResult("two_time_agreement", z_agr, agr_se, sigmas, min(fwd.n_paths, dual.n_paths),
                               info + f"; z(reversed - dual) = {z_agr:+.2f}", data)
    return separation, agreement


def default_functionals(dim):
    """Two-time moment battery ``(name, f1, f2)``: first and second moments and
    a mixed product when dim >= 2."""
    out = [
        ("x1", lambda x: x[:, 0], lambda x: np.ones(len(x))),
        ("x1*x1", lambda x: x[:, 0], lambda x: x[:, 0]),
        ("cos", lambda x: np.cos(x[:, 0]), lambda x: np.cos(x[:, -1])),
        ("r2", lambda x: np.sum(x * x, axis=1), lambda x: np.ones(len(x))),
    ]
    if dim >= 2:
        out.append(("x1*x2", lambda x: x[:, 0], lambda x: x[:, 1]))
    return out


def marginal_agreement_test(ens_a: PathEnsemble, ens_b: PathEnsemble, t_marks, functions=None,
                            bias_c=1.0, sigmas=3.0) -> StatTestResult:
    """Compare ``E[f1(X_t1) f2(X_t2)]`` between two constructions.

    ``t_marks`` is a list of ``(t1, t2)``; ``functions`` a list of
    ``(name, f1, f2)``. Each difference must stay within
    ``sigmas * pooled SE + bias_c * dt`` with dt the coarser step. The
    statistic is the worst ratio of difference to allowance.
    """
    functions = default_functionals(ens_a.dim) if functions is None else functions
    dt = max(ens_a.dt, ens_b.dt)
    worst, rows = 0.0, []
    for t1, t2 in t_marks:
        for name, f1, f2 in functions:
            ma, sa = _pair_mean(ens_a, f1, f2, t1, t2)
            mb, sb = _pair_mean(ens_b, f1, f2, t1, t2)
            allow = sigmas * math.hypot(sa, sb) + bias_c * dt
            ratio = abs(ma - mb) / allow
            rows.append({"t1": t1, "t2": t2, "f": name, "a": ma, "b": mb, "allowance": allow})
            worst = max(worst, ratio)
    n_eff = min(int(ens_a.alive().sum()), int(ens_b.alive().sum()))
    bad = [r for r in rows if abs(r["a"] - r["b"]) > r["allowance"]]
    details = f"{len(rows)} functionals, worst |diff|/allowance = {worst:.2f}"
    if bad:
        details += "; failing: " + ", ".join(f"{r['f']}@({r['t1']:g},{r['t2']:g})" for r in bad)
    return StatTestResult("marginal_agreement", worst, float("nan"), 1.0, n_eff, details, data={"rows": rows})
