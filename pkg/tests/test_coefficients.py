import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from prescribed_sde.coefficients import (CoefficientSet, MeasureDensity, antisymmetric_divfree, assemble_drift,
                                         dispersion, generator_apply, log_derivative, measure_of, psd_sqrt,
                                         rho_from_drift_1d)
from prescribed_sde.errors import NonPositiveDiffusion, NotAntisymmetric, NotPSD, SingularPoint
from prescribed_sde.fields import (MatrixField, ScalarField, VectorField, constant_scalar, fd_gradient,
                                   gaussian_density, identity_matrix, zero_vector)
from prescribed_sde.quadrature import integrate
from prescribed_sde.scenarios import constant_antisymmetric, singular_rotation_drift
from prescribed_sde.validators import TestFunctionBattery


def ou(d=2, B=None):
    return CoefficientSet(gaussian_density(d), constant_scalar(d, 1.0), identity_matrix(d),
                          B if B is not None else zero_vector(d), name="ou")


def scalar_1d(fn, grad=None, hess=None):
    return ScalarField(1, lambda x: fn(x[..., 0]),
                       grad=None if grad is None else (lambda x: grad(x[..., 0])[..., None]),
                       hess=None if hess is None else (lambda x: hess(x[..., 0])[..., None, None]))


def quadratic_a_1d():
    """d = 1, A = a = 1 + x^2 (analytic divergence 2x), rho = exp(-x^2), psi = 1."""
    A = MatrixField(1, lambda x: (1.0 + x[..., 0] ** 2)[..., None, None], symmetric=True,
                    divergence=lambda x: 2.0 * x)
    return CoefficientSet(gaussian_density(1), constant_scalar(1, 1.0), A, zero_vector(1))


def random_points(rng, n, d, scale=2.0):
    return rng.uniform(-scale, scale, size=(n, d))


# --- log_derivative / assemble_drift ------------------------------------------------------

def test_log_derivative_ou():
    np.testing.assert_allclose(log_derivative(ou(), np.array([1.0, 0.0])), [-1.0, 0.0], atol=1e-14)
    np.testing.assert_array_equal(log_derivative(ou(), np.zeros(2)), [0.0, 0.0])


def test_log_derivative_divides_by_psi():
    cs = CoefficientSet(gaussian_density(2), constant_scalar(2, 4.0), identity_matrix(2), zero_vector(2))
    x = np.array([0.5, -2.0])
    np.testing.assert_allclose(log_derivative(cs, x), -x / 4.0, rtol=1e-14)


def test_log_derivative_variable_diffusion_1d():
    # beta = a'/2 + a rho'/(2 rho) = 1 + 2 * (-1) = -1 at x = 1
    cs = quadratic_a_1d()
    assert log_derivative(cs, np.array([1.0]))[0] == pytest.approx(-1.0, abs=1e-14)
    # the same value from finite differences of a and rho only
    a = ScalarField(1, lambda x: 1.0 + x[..., 0] ** 2)
    rho = ScalarField(1, lambda x: np.exp(-x[..., 0] ** 2))
    x = np.array([1.0])
    fd = 0.5 * fd_gradient(a, x)[0] + a(x) * fd_gradient(rho, x)[0] / (2.0 * rho(x))
    assert fd == pytest.approx(-1.0, abs=1e-8)


def test_fd_divergence_fallback_matches_analytic():
    A_fd = MatrixField(1, lambda x: (1.0 + x[..., 0] ** 2)[..., None, None], symmetric=True)
    cs = CoefficientSet(gaussian_density(1), constant_scalar(1, 1.0), A_fd, zero_vector(1))
    X = np.linspace(-2, 2, 9)[:, None]
    np.testing.assert_allclose(log_derivative(cs, X), log_derivative(quadratic_a_1d(), X), atol=1e-8)


@pytest.mark.parametrize("d", [1, 2, 3])
def test_ou_drift_is_minus_x(rng, d):
    X = random_points(rng, 30, d)
    np.testing.assert_allclose(assemble_drift(ou(d))(X), -X, atol=1e-14)


def test_drift_vanishes_when_B_cancels_beta(rng):
    cs0 = ou()
    B = VectorField(2, lambda x: -log_derivative(cs0, x))
    X = random_points(rng, 40, 2)
    np.testing.assert_array_equal(assemble_drift(cs0.with_B(B))(X), 0.0)


def test_singular_rotation_drift_matches_closed_form(rng, scenarios):
    sc = scenarios("singular-rotation")
    X = random_points(rng, 20, 2, 3.0)
    G = assemble_drift(sc.cs)(X)
    ref = singular_rotation_drift(X, 1.0, 0.1, 1.0)
    assert np.max(np.linalg.norm(G - ref, axis=1) / np.linalg.norm(ref, axis=1)) <= 1e-6


def test_singular_rotation_drift_other_parameters(rng, scenarios):
    sc = scenarios("singular-rotation", d=3, alpha=0.5, beta=0.2, phi=2.0)
    X = random_points(rng, 20, 3, 2.0)
    G = assemble_drift(sc.cs)(X)
    ref = singular_rotation_drift(X, 0.5, 0.2, 2.0)
    assert np.max(np.linalg.norm(G - ref, axis=1) / np.linalg.norm(ref, axis=1)) <= 1e-6


def test_drift_refuses_singular_point(scenarios):
    with pytest.raises(SingularPoint):
        scenarios("singular-rotation").cs.drift(np.zeros(2))


def test_analytic_and_fd_gradients_agree_on_scenarios(rng, scenarios):
    for name in ("ou-gauss", "ou-psi", "singular-rotation", "constructed-1d"):
        cs = scenarios(name).cs
        X = random_points(rng, 100, cs.dim, 2.5)
        for f in (cs.rho, cs.psi):
            if not f.has_grad:
                continue
            exact = f.gradient(X)
            fd = fd_gradient(ScalarField(cs.dim, f, singular_points=f.singular_points), X)
            err = np.linalg.norm(fd - exact, axis=1)
            assert np.all(err <= 1e-4 * np.maximum(np.linalg.norm(exact, axis=1), 1e-300) + 1e-12), name


# --- dispersion ---------------------------------------------------------------------

def test_dispersion_identity():
    np.testing.assert_array_equal(dispersion(ou(3), np.array([0.3, 1.0, -2.0])), np.eye(3))


def test_dispersion_singular_rotation_radius_four(scenarios):
    cs = scenarios("singular-rotation").cs
    x = np.array([4.0, 0.0])
    np.testing.assert_allclose(dispersion(cs, x), 2.0 * np.eye(2), rtol=1e-14)
    x = np.array([4.0 / np.sqrt(2), -4.0 / np.sqrt(2)])
    np.testing.assert_allclose(dispersion(cs, x), 2.0 * np.eye(2), rtol=1e-12)


def test_dispersion_random_spd(rng):
    for _ in range(20):
        L = rng.normal(size=(2, 2))
        S = L @ L.T + 0.1 * np.eye(2)
        psi0 = rng.uniform(0.2, 5.0)
        A = MatrixField(2, lambda x, S=S: np.broadcast_to(S, x.shape + (2,)).copy(), symmetric=True,
                        divergence=lambda x: np.zeros_like(x))
        cs = CoefficientSet(gaussian_density(2), constant_scalar(2, psi0), A, zero_vector(2))
        x = rng.normal(size=2)
        s = dispersion(cs, x)
        assert np.abs(s @ s.T - cs.a_hat(x)).max() <= 1e-10
        np.testing.assert_allclose(s, s.T, atol=1e-14)


def test_dispersion_clips_tiny_negative_eigenvalues():
    M = np.array([[1.0, 1.0], [1.0, 1.0 - 5e-11]])
    s = psd_sqrt(M)
    assert np.all(np.isfinite(s))
    np.testing.assert_allclose(s @ s, M, atol=1e-9)


def test_dispersion_rejects_indefinite():
    with pytest.raises(NotPSD):
        psd_sqrt(np.diag([1.0, -1e-6]))


@settings(max_examples=50)
@given(st.floats(0.05, 3.0), st.floats(-0.9, 0.9), st.floats(0.05, 3.0), st.floats(0.1, 10.0))
def test_dispersion_reproduces_a_hat(a11, corr, a22, psi0):
    a12 = corr * np.sqrt(a11 * a22)
    S = np.array([[a11, a12], [a12, a22]])
    A = MatrixField(2, lambda x: np.broadcast_to(S, x.shape + (2,)).copy(), symmetric=True,
                    divergence=lambda x: np.zeros_like(x))
    cs = CoefficientSet(gaussian_density(2), constant_scalar(2, psi0), A, zero_vector(2))
    s = dispersion(cs, np.array([0.1, 0.2]))
    assert np.abs(s @ s.T - S / psi0).max() <= 1e-8 * np.abs(S / psi0).max()


def test_psi_floor_is_counted():
    psi = ScalarField(1, lambda x: np.abs(x[..., 0]))
    cs = CoefficientSet(gaussian_density(1), psi, identity_matrix(1), zero_vector(1), psi_floor=1e-6)
    s = dispersion(cs, np.array([[0.0], [1e-9], [1.0]]))
    assert cs.floor_counter.value == 2
    assert s[0, 0, 0] == pytest.approx(1e3)


# --- generator_apply ----------------------------------------------------------------

@pytest.mark.parametrize("d", [1, 2, 3])
def test_generator_on_square_norm(d):
    u = ScalarField(d, lambda x: np.sum(x * x, axis=-1), grad=lambda x: 2 * x,
                    hess=lambda x: np.broadcast_to(2 * np.eye(d), x.shape + (d,)))
    x = np.zeros(d)
    x[0] = 1.0
    assert generator_apply(ou(d), u, x) == pytest.approx(d - 2.0, abs=1e-13)


def test_generator_kills_constants(rng, scenarios):
    for name in ("ou-rotation", "singular-rotation", "constructed-1d"):
        cs = scenarios(name).cs
        one = constant_scalar(cs.dim, 3.0)
        X = random_points(rng, 20, cs.dim)
        np.testing.assert_array_equal(generator_apply(cs, one, X), 0.0)
        np.testing.assert_array_equal(generator_apply(cs, one, X, "dual"), 0.0)


def test_forward_minus_dual_is_twice_B_term(rng, scenarios):
    cs = scenarios("singular-rotation").cs
    u = TestFunctionBattery(2, (-np.ones(2) * 2, np.ones(2) * 2))[3]
    X = random_points(rng, 50, 2, 1.5)
    diff = generator_apply(cs, u, X, "forward") - generator_apply(cs, u, X, "dual")
    ref = 2.0 * np.einsum("pi,pi->p", cs.B(X), u.gradient(X))
    assert np.abs(diff - ref).max() <= 1e-10


def test_dual_generator_equals_forward_of_negated_B(rng, scenarios):
    cs = scenarios("ou-rotation").cs
    u = TestFunctionBattery(2)[1]
    X = random_points(rng, 50, 2)
    np.testing.assert_array_equal(generator_apply(cs, u, X, "dual"), generator_apply(cs.dual(), u, X, "forward"))
    np.testing.assert_array_equal(cs.dual().dual().B(X), cs.B(X))


def test_unknown_direction_rejected():
    with pytest.raises(ValueError):
        ou().drift(np.zeros(2), "backward")


# --- antisymmetric_divfree -----------------------------------------------------------

def test_rotation_field_is_tangential(rng, scenarios):
    cs = scenarios("singular-rotation").cs
    X = random_points(rng, 100, 2, 3.0)
    B = cs.B(X)
    assert np.abs(np.einsum("pi,pi->p", B, X)).max() <= 1e-10


def test_zero_matrix_gives_zero_field(rng):
    C = MatrixField(2, lambda x: np.zeros(x.shape + (2,)), divergence=lambda x: np.zeros_like(x))
    B = antisymmetric_divfree(gaussian_density(2), constant_scalar(2, 1.0), C)
    np.testing.assert_array_equal(B(random_points(rng, 10, 2)), 0.0)


def test_constant_antisymmetric_gaussian(rng):
    C = constant_antisymmetric(2, 1.5)
    B = antisymmetric_divfree(gaussian_density(2), constant_scalar(2, 1.0), C)
    X = random_points(rng, 30, 2)
    Cm = C(np.zeros(2))
    np.testing.assert_allclose(B(X), -X @ Cm, atol=1e-14)  # -C^T x
    cs = ou(2, B)
    for u in TestFunctionBattery(2):
        lo, hi = u.support_box
        f = lambda x, u=u: np.einsum("pi,pi->p", cs.B(x), u.gradient(x)) * cs.density(x)  # noqa: E731
        coarse = integrate(f, lo, hi, n=64)
        fine = integrate(f, lo, hi, n=128)
        assert abs(fine) <= 1e-6
        assert abs(coarse - fine) <= 1e-6


def test_not_antisymmetric_rejected():
    C = MatrixField(2, lambda x: np.broadcast_to(np.eye(2), x.shape + (2,)).copy())
    with pytest.raises(NotAntisymmetric):
        antisymmetric_divfree(gaussian_density(2), constant_scalar(2, 1.0), C)


def test_divfree_field_carries_flux_potential(scenarios):
    B = scenarios("ou-rotation").cs.B
    S = B.flux_potential(np.array([[0.3, -0.2]]))
    np.testing.assert_allclose(S[0] + S[0].T, 0.0)


# --- d = 1 construction -----------------------------------------------------------------

def test_rho_from_linear_drift_is_gaussian():
    one = constant_scalar(1, 1.0)
    g = scalar_1d(lambda y: -y, grad=lambda y: -np.ones_like(y))
    xs = np.linspace(-3, 3, 13)
    np.testing.assert_allclose(rho_from_drift_1d(one, one, g, xs), np.exp(-xs**2), rtol=1e-12)


def test_rho_is_flat_when_drift_is_half_a_prime():
    a = scalar_1d(lambda y: 2.0 + np.sin(y), grad=lambda y: np.cos(y))
    psi = scalar_1d(lambda y: 1.0 + y**2)
    g = scalar_1d(lambda y: 0.5 * np.cos(y) / (1.0 + y**2))
    xs = np.linspace(-2, 2, 9)
    np.testing.assert_allclose(rho_from_drift_1d(a, psi, g, xs), 1.0, atol=1e-13)


def test_constructed_rho_reproduces_target_drift():
    a = scalar_1d(lambda y: 1.0 + y**2, grad=lambda y: 2.0 * y)
    one = constant_scalar(1, 1.0)
    g = scalar_1d(lambda y: -y)
    rho = ScalarField(1, lambda x: rho_from_drift_1d(a, one, g, x[..., 0]))
    A = MatrixField(1, lambda x: (1.0 + x[..., 0] ** 2)[..., None, None], symmetric=True,
                    divergence=lambda x: 2.0 * x)
    cs = CoefficientSet(rho, one, A, zero_vector(1))  # log-gradient of rho by finite differences
    xs = np.linspace(-3, 3, 20)[:, None]
    resid = np.abs(-xs[:, 0] - log_derivative(cs, xs)[:, 0])
    assert resid.max() <= 1e-6
    # closed form for these coefficients
    np.testing.assert_allclose(rho(xs), (1.0 + xs[:, 0] ** 2) ** -2, rtol=1e-12)


def test_constructed_rho_panel_doubling():
    a = scalar_1d(lambda y: 1.0 + y**2, grad=lambda y: 2.0 * y)
    one = constant_scalar(1, 1.0)
    g = scalar_1d(lambda y: -y - 0.3 * np.sin(3 * y))
    xs = np.array([-3.0, -1.0, 0.5, 2.0, 3.0])
    for p in (8, 16, 32):
        r1 = rho_from_drift_1d(a, one, g, xs, panels=p)
        r2 = rho_from_drift_1d(a, one, g, xs, panels=2 * p)
        assert np.all(np.abs(r2 - r1) <= 1e-8 * r2)


def test_constructed_rho_rejects_nonpositive_diffusion():
    a = scalar_1d(lambda y: 1.0 - y**2, grad=lambda y: -2.0 * y)
    one = constant_scalar(1, 1.0)
    with pytest.raises(NonPositiveDiffusion):
        rho_from_drift_1d(a, one, scalar_1d(lambda y: -y), np.array([2.0]))


# --- measures ---------------------------------------------------------------------------

def test_measure_modes():
    cs = ou(1)
    m = measure_of(cs, np.sqrt(np.pi))
    assert m.mode == "finite-normalized"
    assert m.normalized(np.zeros(1)) == pytest.approx(1 / np.sqrt(np.pi))
    assert measure_of(cs).mode == "sigma-finite"
    with pytest.raises(ValueError):
        measure_of(cs).normalized(np.zeros(1))
    with pytest.raises(ValueError):
        MeasureDensity(m.density, None, "finite-normalized")


def test_coefficient_set_validates_inputs():
    with pytest.raises(ValueError):
        CoefficientSet(gaussian_density(2), constant_scalar(1, 1.0), identity_matrix(2), zero_vector(2))
    A = MatrixField(2, lambda x: np.zeros(x.shape + (2,)))
    with pytest.raises(Exception):
        CoefficientSet(gaussian_density(2), constant_scalar(2, 1.0), A, zero_vector(2))
