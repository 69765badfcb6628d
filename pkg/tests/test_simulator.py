import csv
import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from prescribed_sde import simulator as sim
from prescribed_sde.coefficients import CoefficientSet
from prescribed_sde.fields import MatrixField, ScalarField, VectorField, constant_scalar, gaussian_density, \
    identity_matrix, zero_vector
from prescribed_sde.validators import radial_bump


def ou(d=1):
    return CoefficientSet(gaussian_density(d), constant_scalar(d, 1.0), identity_matrix(d), zero_vector(d),
                          name="ou")


def frozen(d=2):
    """A = 0, B = 0: sigma_hat and G both vanish."""
    A = MatrixField(d, lambda x: np.zeros(x.shape + (d,)), symmetric=True, divergence=lambda x: np.zeros_like(x))
    return CoefficientSet(constant_scalar(d, 1.0), constant_scalar(d, 1.0), A, zero_vector(d))


def quadratic(d=1):
    return ScalarField(d, lambda x: np.sum(x * x, axis=-1), grad=lambda x: 2.0 * x,
                       hess=lambda x: np.broadcast_to(2.0 * np.eye(d), x.shape + (d,)).copy(), name="r2")


# --- configuration and streams -----------------------------------------------------

@pytest.mark.parametrize("kw", [dict(dt=0.0), dict(dt=0.3, T=1.0), dict(n_paths=0), dict(direction="sideways"),
                                dict(record_every=0), dict(dt=2.0, T=1.0)])
def test_sim_config_validation(kw):
    base = dict(dt=0.1, T=1.0, n_paths=4)
    base.update(kw)
    with pytest.raises(ValueError):
        sim.SimConfig(**base)


def test_initial_point_dimension_checked():
    with pytest.raises(ValueError):
        sim.simulate(ou(2), sim.SimConfig(0.1, 0.2, 2, initial=[0.0, 0.0, 1.0]))


def test_reproducible_for_fixed_seed():
    cfg = sim.SimConfig(0.01, 0.5, 50, seed=11, initial=[0.3])
    a, b = sim.simulate(ou(), cfg), sim.simulate(ou(), cfg)
    np.testing.assert_array_equal(a.states, b.states)
    c = sim.simulate(ou(), sim.SimConfig(0.01, 0.5, 50, seed=12, initial=[0.3]))
    assert not np.array_equal(a.states, c.states)


@settings(max_examples=10)
@given(st.integers(1, 40), st.integers(0, 2**31))
def test_path_independent_of_ensemble_size(n, seed):
    small = sim.simulate(ou(), sim.SimConfig(0.05, 0.5, n, seed=seed, initial=[1.0]))
    big = sim.simulate(ou(), sim.SimConfig(0.05, 0.5, 41, seed=seed, initial=[1.0]))
    np.testing.assert_array_equal(small.states, big.states[:n])


def test_path_independent_of_block_layout(monkeypatch):
    cfg = sim.SimConfig(0.01, 1.0, 7, seed=3, initial=[0.0, 1.0])
    ref = sim.simulate(ou(2), cfg)
    monkeypatch.setattr(sim, "DRAW_BUDGET", 7 * 2 * 3)  # blocks of 3 steps
    np.testing.assert_array_equal(sim.simulate(ou(2), cfg).states, ref.states)


def test_streams_are_distinct():
    a0, a1 = sim.path_streams(5, 0)
    b0, _ = sim.path_streams(5, 1)
    x, y, z = a0.random(4), a1.random(4), b0.random(4)
    assert not np.array_equal(x, y) and not np.array_equal(x, z)


def test_dual_equals_forward_with_negated_B(scenarios):
    cs = scenarios("ou-rotation").cs
    cfg = dict(dt=0.01, T=0.3, n_paths=20, seed=8, initial=[0.5, -0.2])
    dual = sim.simulate(cs, sim.SimConfig(direction="dual", **cfg))
    neg = sim.simulate(cs.dual(), sim.SimConfig(**cfg))
    np.testing.assert_array_equal(dual.states, neg.states)
    assert dual.direction == "dual"


def test_record_every_subsamples():
    full = sim.simulate(ou(), sim.SimConfig(0.01, 0.1, 3, seed=1))
    sub = sim.simulate(ou(), sim.SimConfig(0.01, 0.1, 3, seed=1, record_every=3))
    np.testing.assert_allclose(sub.times, [0.0, 0.03, 0.06, 0.09, 0.1])
    np.testing.assert_array_equal(sub.states[:, 1], full.states[:, 3])
    np.testing.assert_array_equal(sub.states[:, -1], full.states[:, -1])


# --- dynamics --------------------------------------------------------------------------

def test_no_taming_on_ou():
    ens = sim.simulate(ou(), sim.SimConfig(0.001, 0.2, 100, seed=0))
    assert ens.taming_activations.sum() == 0
    assert not ens.exploded.any()


def test_taming_counted_for_fast_drift(scenarios):
    ens = sim.simulate(scenarios("superlinear-drift").cs, sim.SimConfig(0.01, 0.5, 20, seed=0, initial=[2.0, 0.0]))
    assert ens.taming_activations.sum() > 0


def test_constant_paths_without_noise_or_drift():
    ens = sim.simulate(frozen(), sim.SimConfig(0.1, 1.0, 5, initial=[0.4, -1.2]))
    assert np.all(ens.states == np.array([0.4, -1.2]))


def test_untamed_explosion_is_flagged(scenarios):
    ens = sim.simulate(scenarios("superlinear-drift").cs,
                       sim.SimConfig(0.1, 5.0, 10, seed=0, taming=False, initial=[3.0, 0.0]))
    assert ens.exploded.all()
    assert np.all(np.isfinite(ens.states))
    assert ens.at(5.0).shape == (0, 2)


def test_singular_initial_point_refused(scenarios):
    with pytest.raises(ValueError, match="singular"):
        sim.simulate(scenarios("singular-rotation").cs, sim.SimConfig(0.01, 0.1, 3, initial=[0.0, 0.0]))


def test_singular_rotation_paths_stay_finite(scenarios):
    ens = sim.simulate(scenarios("singular-rotation").cs, sim.SimConfig(0.005, 0.5, 200, seed=2, initial=[0.3, 0.1]))
    assert np.all(np.isfinite(ens.states))
    assert ens.exploded.sum() == 0


def test_ensemble_queries():
    ens = sim.simulate(ou(), sim.SimConfig(0.1, 1.0, 6, seed=0))
    assert ens.index(0.3) == 3
    with pytest.raises(ValueError):
        ens.index(0.35)
    s = ens.summary()
    assert s["n_paths"] == 6 and s["n_times"] == 11 and s["exploded"] == 0


def test_to_csv(tmp_path):
    ens = sim.simulate(ou(2), sim.SimConfig(0.25, 0.5, 3, seed=0))
    ens.to_csv(tmp_path / "p.csv", max_paths=2)
    rows = list(csv.reader(open(tmp_path / "p.csv")))
    assert rows[0] == ["path_id", "t", "x_1", "x_2"]
    assert len(rows) == 1 + 2 * 3
    assert float(rows[-1][3]) == ens.states[1, -1, 1]


def test_exact_ou_moments():
    ens = sim.exact_ou_ensemble(1, sim.SimConfig(0.5, 2.0, 4000, seed=3, initial=[2.0]))
    x = ens.at(2.0)[:, 0]
    m, v = 2.0 * math.exp(-2.0), 0.5 * (1 - math.exp(-4.0))
    assert abs(x.mean() - m) <= 4 * math.sqrt(v / len(x))
    assert abs(x.var() - v) <= 0.1 * v


# --- initial laws ---------------------------------------------------------------------

def test_stationary_law_by_rejection(scenarios):
    sc = scenarios("ou-gauss")
    ens = sim.simulate(sc.cs, sim.SimConfig(0.1, 0.1, 3000, seed=4, initial=sim.stationary_law(sc)))
    x = ens.at(0.0)
    assert 0.0 < ens.acceptance_rate <= 1.0
    np.testing.assert_allclose(x.var(axis=0), 0.5, rtol=0.1)


def test_rejection_law_detects_bad_envelope():
    class Env:
        bound = 0.5

        def sample(self, rng, n):
            return rng.standard_normal((n, 1))

        def pdf(self, y):
            return np.exp(-0.5 * y[:, 0] ** 2) / math.sqrt(2 * math.pi)

    law = sim.RejectionLaw(lambda y: np.exp(-0.5 * y[:, 0] ** 2), Env())
    with pytest.raises(ValueError, match="envelope"):
        law.sample(np.random.default_rng(0), 1)


def test_stationary_law_needs_envelope(scenarios):
    with pytest.raises(ValueError):
        sim.stationary_law(scenarios("brownian"))


# --- statistical tests -------------------------------------------------------------------

def test_martingale_of_zero_function():
    ens = sim.simulate(ou(), sim.SimConfig(0.01, 0.5, 50, seed=0))
    zero = ScalarField(1, lambda x: np.zeros(x.shape[:-1]), grad=lambda x: np.zeros_like(x),
                       hess=lambda x: np.zeros(x.shape + (1,)))
    res = sim.martingale_test(ens, ou(), zero, [0.25, 0.5])
    assert res.statistic == 0.0 and res.passed


def test_martingale_detects_wrong_generator(scenarios):
    sc = scenarios("ou-rotation")
    ens = sim.simulate(sc.cs, sim.SimConfig(0.01, 1.0, 2000, seed=5, initial=[0.5, 0.5]))
    u = radial_bump(np.array([0.3, 0.0]), 2.0)
    assert sim.martingale_test(ens, sc.cs, u, [0.5, 1.0]).passed
    wrong = sc.cs.with_B(sc.cs.B + VectorField(2, lambda x: np.broadcast_to([2.0, 0.0], x.shape).copy()))
    assert not sim.martingale_test(ens, wrong, u, [0.5, 1.0]).passed


def test_quadratic_variation_zero_noise():
    ens = sim.simulate(frozen(1), sim.SimConfig(0.1, 1.0, 5, initial=[0.7]))
    res = sim.quadratic_variation_test(ens, frozen(1), quadratic(), 1.0)
    assert res.statistic == 0.0 and res.passed


def test_quadratic_variation_brownian(scenarios):
    # d(x^2) has quadratic variation 4 x^2 dt
    cs = scenarios("brownian").cs
    ens = sim.simulate(cs, sim.SimConfig(0.001, 0.5, 1000, seed=6, initial=[1.0]))
    res = sim.quadratic_variation_test(ens, cs, quadratic(), 0.5)
    assert res.passed, res.details


def test_invariance_at_time_zero(scenarios):
    sc = scenarios("ou-gauss")
    ens = sim.simulate(sc.cs, sim.SimConfig(0.1, 0.1, 4000, seed=9, initial=sim.stationary_law(sc)))
    assert sim.empirical_invariance_test(ens, sc.measure, 0.0).passed


def test_invariance_detects_wrong_start(scenarios):
    sc = scenarios("ou-gauss")
    ens = sim.simulate(sc.cs, sim.SimConfig(0.1, 0.1, 4000, seed=9, initial=[1.5, 0.0]))
    assert not sim.empirical_invariance_test(ens, sc.measure, 0.1).passed


def test_ks_threshold_scaling():
    assert sim.ks_threshold(100, 100) == pytest.approx(1.82 * math.sqrt(0.02))
    assert sim.ks_threshold(400, 400) == pytest.approx(0.5 * sim.ks_threshold(100, 100))


def test_marginal_agreement_different_seeds():
    a = sim.simulate(ou(), sim.SimConfig(0.01, 1.0, 2000, seed=1, initial=[1.0]))
    b = sim.simulate(ou(), sim.SimConfig(0.01, 1.0, 2000, seed=2, initial=[1.0]))
    assert sim.marginal_agreement_test(a, b, [(0.5, 1.0), (1.0, 1.0)]).passed
    c = sim.simulate(ou(), sim.SimConfig(0.01, 1.0, 2000, seed=2, initial=[2.0]))
    assert not sim.marginal_agreement_test(a, c, [(0.5, 1.0)]).passed


def test_time_reversal_of_reversible_ou(scenarios):
    sc = scenarios("ou-gauss")
    cfg = dict(dt=0.01, T=1.0, n_paths=2000, initial=sim.stationary_law(sc))
    fwd = sim.simulate(sc.cs, sim.SimConfig(seed=1, **cfg))
    dual = sim.simulate(sc.cs, sim.SimConfig(seed=2, direction="dual", **cfg))
    assert sim.time_reversal_test(fwd, dual, 1.0, [0.0, 0.5, 1.0]).passed


def test_two_time_diagnostic_shapes():
    a = sim.simulate(ou(), sim.SimConfig(0.1, 1.0, 200, seed=1))
    sep, agr = sim.two_time_diagnostic(a, a, lambda x: x[:, 0], lambda x: x[:, 0], 0.2, 0.3)
    assert sep.threshold == pytest.approx(1 / 3) and agr.threshold == 3.0
    assert set(sep.data) == {"forward", "reversed", "dual"}
