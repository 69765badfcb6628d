"""Check batteries behind the command line: each function takes a Scenario and
returns a ValidationReport plus the data files it wrote."""
from __future__ import annotations

import math
import os

import numpy as np

from . import resolvent as rl
from . import simulator as sim
from . import validators as val
from .errors import NotConverged
from .report import ReportEntry, ValidationReport

SIM_TESTS = ("invariance", "martingale", "quadratic-variation", "time-reversal", "marginal-agreement",
             "explosion")


def _scaled(entry: ReportEntry, scale):
    if scale == 1.0:
        return entry
    return ReportEntry(entry.check_id, entry.metric, entry.tolerance * scale, entry.details,
                       "warn" if entry.status == "warn" else "", entry.data)


# --- validate ---------------------------------------------------------------------

def validation_report(sc, tolerance_scale=1.0, n=None) -> ValidationReport:
    """The full analytic battery: ellipticity, the two integral identities,
    integration by parts, conservativeness and growth conditions, and the
    annulus bound when the scenario declares an exponent."""
    cs = sc.cs
    opts = sc.validate
    rep = ValidationReport(meta={"scenario": sc.describe(), "tolerance_scale": tolerance_scale})
    for w in sc.warnings:
        rep.add(ReportEntry("scenario_warning", 0.0, 0.0, w, status="warn"))
    half = float(opts["ellipticity_box"])
    _, _, ell = val.check_ellipticity(cs, (-half, half))
    rep.add(ell)
    battery = val.TestFunctionBattery(cs.dim, sc.battery_box, n=12, seed=0)
    tol = val.INTEGRAL_TOL * tolerance_scale
    rep.add(val.check_divergence_free(cs, battery, n=n, tol=tol))
    rep.add(val.check_infinitesimal_invariance(cs, battery, n=n, tol=tol))
    pairs = battery.pairs(int(opts["n_pairs"]))
    ibp = [val.check_integration_by_parts(cs, battery[i], battery[j], n=n, tol=tol) for i, j in pairs]
    worst = max(ibp, key=lambda e: e.metric)
    rep.add(ReportEntry("integration_by_parts", worst.metric, tol,
                        f"max relative residual over {len(ibp)} pairs; worst: {worst.details}",
                        data={"metrics": [e.metric for e in ibp]}))
    M, N0, R_max, ns = float(opts["M"]), float(opts["N0"]), opts["R_max"], int(opts["n_samples"])
    for direction in ("forward", "dual"):
        rep.add(_scaled(val.check_lyapunov_conservative(cs, M, N0, direction, ns, R_max), tolerance_scale))
    for variant in ("B-plus", "B-minus", "divfree-form"):
        rep.add(_scaled(val.check_growth_condition(cs, variant, M, N0, ns, R_max), tolerance_scale))
    if sc.annulus_c is not None:
        rep.add(val.check_annulus_volume(sc.measure, sc.annulus_c))
    rep.psi_floor_activations = cs.floor_counter.value
    return rep


# --- resolvent --------------------------------------------------------------------

RESOLVENT_DEFAULTS = {"boxes": [1.0, 2.0, 3.0, 4.0, 5.0], "n": None, "alpha": 1.0, "trials": 6}


def _default_per_unit(dim):
    return {1: 16, 2: 8}.get(dim, 4)


def box_family(sc, boxes, per_unit):
    """Nested grids with common step ``1 / per_unit``. With declared singular
    points the boxes are shifted by half a step so no node lands on one."""
    d = sc.dim
    h = 1.0 / per_unit
    shift = 0.5 * h if sc.cs.singular_points else 0.0
    return [rl.GridSpec.from_step(np.full(d, -L + shift), np.full(d, L + shift), h) for L in boxes]


def resolvent_report(sc, opts=None, tolerance_scale=1.0, out_dir=None):
    """Structure checks on the largest box, duality, nested monotonicity, the
    global-resolvent profile and (finite mu_hat) the invariance probe."""
    o = {**RESOLVENT_DEFAULTS, **sc.resolvent, **(opts or {})}
    boxes = sorted(float(b) for b in o["boxes"])
    per_unit = int(o["n"] or _default_per_unit(sc.dim))
    alpha = float(o["alpha"])
    trials = int(o["trials"])
    specs = box_family(sc, boxes, per_unit)
    rep = ValidationReport(meta={"scenario": sc.describe(), "boxes": boxes, "nodes_per_unit": per_unit,
                                 "alpha": alpha, "stencil": "conservative"})
    files = []
    big = specs[-1]
    op = rl.discretize(sc.cs, big)
    min_off, max_diag, max_row = rl.m_matrix_violations(op)
    rep.add(ReportEntry("m_matrix", max(-min_off, max_row, max_diag, 0.0), 1e-10 * tolerance_scale,
                        f"min off-diagonal {min_off:.3e}, max diagonal {max_diag:.3e}, max row sum {max_row:.3e}"))
    data = rl.random_unit_data(op, trials, seed=0)
    for entry in (rl.check_submarkov(op, alpha, data=data),
                  rl.check_l1_contraction(op, alpha, data=data[1:]),
                  rl.check_resolvent_equation(op, alpha, 2.0 * alpha, max(2, trials // 2))):
        rep.add(_scaled(entry, tolerance_scale))
    rep.add(_scaled(rl.check_duality(sc.cs, big, alpha, trials), tolerance_scale))
    if len(specs) >= 2:
        rng = np.random.default_rng(5)
        F = rng.uniform(0.0, 1.0, (max(trials, 20), specs[0].size))
        rep.add(_scaled(rl.check_nested_monotone(sc.cs, specs[0], specs[1], alpha, F), tolerance_scale))
    bump = lambda X: np.exp(-np.sum(X * X, axis=1))  # noqa: E731
    try:
        limit, profile = rl.global_resolvent(sc.cs, specs, alpha, bump, tol=rl.GLOBAL_TOL * tolerance_scale)
        last = profile["l1_increment"][-1] if profile["l1_increment"] else float("nan")
        rep.add(ReportEntry("global_resolvent", last, rl.GLOBAL_TOL * tolerance_scale,
                            "weighted L1 increments on the smallest box: "
                            + ", ".join(f"{v:.3e}" for v in profile["l1_increment"]), data=profile))
    except NotConverged as exc:
        profile = exc.profile
        limit = None
        last = profile["l1_increment"][-1] if profile["l1_increment"] else float("nan")
        rep.add(ReportEntry("global_resolvent", last, rl.GLOBAL_TOL * tolerance_scale, str(exc), data=profile))
    if sc.finite and len(specs) >= 2:
        w = specs[0]
        window = (np.array(w.lo), np.array(w.hi))
        rep.add(rl.check_invariance_probe(sc.cs, specs, alpha, window))
    if out_dir is not None:
        stem = os.path.join(out_dir, f"resolvent-{sc.name}")
        u = alpha * rl.resolvent(op, alpha, bump(big.points()))
        rl.dump_solution(op, u, stem + "-solution.csv", header="alpha_G_alpha_f")
        files.append(stem + "-solution.csv")
        if limit is not None:
            rl.dump_solution(rl.discretize(sc.cs, specs[0]), alpha * limit, stem + "-global.csv",
                             header="alpha_G_alpha_f")
            files.append(stem + "-global.csv")
        if big.size <= 20000:
            rl.dump_matrix(op, stem + "-matrix.txt")
            files.append(stem + "-matrix.txt")
    return rep, files


# --- simulate ---------------------------------------------------------------------

SIMULATE_DEFAULTS = {"dt": 1e-3, "T": 1.0, "paths": 2000, "seed": 0, "tests": None, "record_stride": 10}


def default_tests(sc):
    tests = ["martingale", "explosion"]
    if sc.finite and sc.envelope is not None:
        tests = ["invariance"] + tests + ["time-reversal"]
    if sc.exact_ou:
        tests.append("marginal-agreement")
    return tests


def _martingale_functions(dim):
    c = np.full(dim, 0.3)
    return [val.radial_bump(np.zeros(dim), 2.0, name="radial"),
            val.poly_bump(c, 1.5, lin=np.ones(dim), name="tilted"),
            val.poly_bump(-c, 1.2, quad=np.eye(dim), name="quadratic")]


def _cfg(sc, o, direction="forward", seed_offset=0, dt=None, stride=None):
    initial = sim.stationary_law(sc) if (sc.finite and sc.envelope is not None) else None
    return sim.SimConfig(dt=float(dt or o["dt"]), T=float(o["T"]), n_paths=int(o["paths"]),
                         seed=int(o["seed"]) + seed_offset, direction=direction, initial=initial,
                         record_every=int(stride or o["record_stride"]))


def _checkpoints(T):
    return [0.25 * T, 0.5 * T, T]


def simulate_report(sc, opts=None, tolerance_scale=1.0, out_dir=None):
    """Simulate and run the requested statistical tests."""
    o = {**SIMULATE_DEFAULTS, **sc.simulate, **{k: v for k, v in (opts or {}).items() if v is not None}}
    tests = list(o["tests"] or default_tests(sc))
    unknown = [t for t in tests if t not in SIM_TESTS]
    if unknown:
        raise ValueError(f"unknown test(s) {unknown}; known: {', '.join(SIM_TESTS)}")
    rep = ValidationReport(meta={"scenario": sc.describe(), "simulate": {k: o[k] for k in SIMULATE_DEFAULTS},
                                 "tests": tests})
    files = []
    cfg = _cfg(sc, o)
    ens = sim.simulate(sc.cs, cfg)
    rep.meta["ensemble"] = ens.summary()
    T = cfg.T
    # stride 1 needed for quadratic variation; martingale checkpoints must lie on the grid
    fine = None

    def fine_ensemble():
        nonlocal fine
        if fine is None:
            fine = ens if cfg.record_every == 1 else sim.simulate(sc.cs, _cfg(sc, o, stride=1))
        return fine

    for test in tests:
        if test == "invariance":
            r = sim.empirical_invariance_test(ens, sc.measure, T)
        elif test == "martingale":
            e = fine_ensemble()
            for u in _martingale_functions(sc.dim):
                r = sim.martingale_test(e, sc.cs, u, _checkpoints(T), threshold=3.0 * tolerance_scale)
                rep.add(r.to_entry())
            continue
        elif test == "quadratic-variation":
            e = fine_ensemble()
            for u in _martingale_functions(sc.dim):
                r = sim.quadratic_variation_test(e, sc.cs, u, T, threshold=0.05 * tolerance_scale)
                rep.add(r.to_entry())
            continue
        elif test == "time-reversal":
            dual = sim.simulate(sc.cs, _cfg(sc, o, "dual", seed_offset=1))
            r = sim.time_reversal_test(ens, dual, T, [0.25 * T, 0.5 * T, 0.75 * T])
        elif test == "marginal-agreement":
            other = sim.exact_ou_ensemble(sc.dim, _cfg(sc, o, seed_offset=2)) if sc.exact_ou else \
                sim.simulate(sc.cs, _cfg(sc, o, seed_offset=2, dt=cfg.dt / 4, stride=4 * cfg.record_every))
            r = sim.marginal_agreement_test(ens, other, [(0.5 * T, T), (T, T)])
        else:  # explosion
            frac = float(ens.exploded.mean())
            se = math.sqrt(max(frac * (1 - frac), 1.0 / ens.n_paths) / ens.n_paths)
            r = sim.StatTestResult("explosion", frac, se, 1e-3 + 3.0 * se, ens.n_paths,
                                   f"{int(ens.exploded.sum())} of {ens.n_paths} paths exploded; "
                                   f"{int(ens.taming_activations.sum())} taming activations")
        entry = r.to_entry()
        if tolerance_scale != 1.0 and test != "explosion":
            entry = _scaled(entry, tolerance_scale)
        rep.add(entry)
    if out_dir is not None:
        files += write_simulation_files(sc, ens, out_dir)
    return rep, files


def write_simulation_files(sc, ens, out_dir, max_paths=100):
    stem = os.path.join(out_dir, f"simulate-{sc.name}")
    ens.to_csv(stem + "-paths.csv", max_paths=max_paths)
    out = [stem + "-paths.csv"]
    XT = ens.at(ens.times[-1])
    half = float(max(4.0, np.quantile(np.abs(XT), 0.999))) if len(XT) else 4.0
    edges = np.linspace(-half, half, 41)
    cols = [0.5 * (edges[1:] + edges[:-1])]
    header = ["center"]
    for i in range(ens.dim):
        counts, _ = np.histogram(XT[:, i], edges)
        cols.append(counts / max(len(XT), 1) / np.diff(edges))
        header.append(f"empirical_x{i + 1}")
        if sc.finite:
            p = sim.marginal_bin_probabilities(sc.measure, i, edges, half)
            cols.append(p / np.diff(edges))
            header.append(f"mu_hat_x{i + 1}")
    np.savetxt(stem + "-marginals.csv", np.column_stack(cols), delimiter=",", header=",".join(header),
               comments="", fmt="%.10g")
    out.append(stem + "-marginals.csv")
    u = _martingale_functions(ens.dim)[0]
    M = sim.martingale_values(ens, sc.cs, u, ens.times[-1])
    se = M.std(axis=0, ddof=1) / math.sqrt(max(len(M), 2))
    np.savetxt(stem + "-martingale.csv", np.column_stack([ens.times, M.mean(axis=0), se]), delimiter=",",
               header="t,mean_M,se", comments="", fmt="%.10g")
    out.append(stem + "-martingale.csv")
    with open(stem + "-plot.py", "w") as fh:
        fh.write(PLOT_SCRIPT.format(stem=os.path.basename(stem), dim=ens.dim, finite=sc.finite))
    out.append(stem + "-plot.py")
    return out


PLOT_SCRIPT = '''"""Plots for {stem}: marginal histograms against mu_hat and the martingale mean trace.
Run from the directory holding the CSV files (needs matplotlib)."""
import csv

import matplotlib.pyplot as plt


def read(path):
    with open(path) as fh:
        rows = list(csv.DictReader(fh))
    return {{k: [float(r[k]) for r in rows] for k in rows[0]}}


m = read("{stem}-marginals.csv")
fig, axes = plt.subplots(1, {dim} + 1, figsize=(4 * ({dim} + 1), 3.2))
for i in range({dim}):
    ax = axes[i]
    ax.step(m["center"], m["empirical_x%d" % (i + 1)], where="mid", label="paths")
    if {finite}:
        ax.plot(m["center"], m["mu_hat_x%d" % (i + 1)], label="mu_hat marginal")
    ax.set_xlabel("x%d" % (i + 1))
    ax.legend()
t = read("{stem}-martingale.csv")
ax = axes[-1]
ax.plot(t["t"], t["mean_M"], label="mean M_t")
ax.fill_between(t["t"], [-3 * s for s in t["se"]], [3 * s for s in t["se"]], alpha=0.3, label="3 SE")
ax.set_xlabel("t")
ax.legend()
fig.tight_layout()
fig.savefig("{stem}-plot.png", dpi=120)
'''
