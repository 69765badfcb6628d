"""Registry of reproducible coefficient sets, their sampling envelopes and
validation defaults, plus loading from a name string or a TOML file."""
from __future__ import annotations

import math
import os
import re
from dataclasses import dataclass, field

import numpy as np
try:
    import tomllib as tomli
except ModuleNotFoundError:  # Python < 3.11
    import tomli
from scipy import integrate
from scipy.special import gammaln

from .coefficients import CoefficientSet, MeasureDensity, antisymmetric_divfree, measure_of
from .errors import ConfigParse, UnknownScenario
from .fields import (MatrixField, ScalarField, VectorField, constant_scalar, gaussian_density,
                     identity_matrix, zero_vector)
from .coefficients import constructed_density_1d


# --- sampling envelopes ----------------------------------------------------------

@dataclass(frozen=True)
class Envelope:
    """Proposal law for rejection sampling of mu_hat.

    ``bound`` must dominate ``psi * rho / q`` where q is the proposal density.

    kind : "gaussian"         N(0, scale^2 / 2 I), q proportional to exp(-|x|^2 / scale^2)
           "radial-gaussian"  q proportional to |x|^-alpha exp(-|x|^2 / scale^2)
           "cauchy"           product of Cauchy(0, scale) marginals
    """

    kind: str
    dim: int
    scale: float
    bound: float
    alpha: float = 0.0

    def __post_init__(self):
        if self.kind not in ("gaussian", "radial-gaussian", "cauchy"):
            raise ValueError(f"unknown envelope kind {self.kind!r}")

    def sample(self, rng, n):
        d = self.dim
        if self.kind == "gaussian":
            return rng.standard_normal((n, d)) * (self.scale / math.sqrt(2.0))
        if self.kind == "cauchy":
            return self.scale * rng.standard_cauchy((n, d))
        r = self.scale * np.sqrt(rng.gamma(0.5 * (d - self.alpha), 1.0, size=n))
        z = rng.standard_normal((n, d))
        return r[:, None] * z / np.linalg.norm(z, axis=1, keepdims=True)

    def pdf(self, x):
        x = np.asarray(x, dtype=float)
        d, s = self.dim, self.scale
        if self.kind == "gaussian":
            return np.exp(-np.sum(x * x, axis=-1) / s**2) / (math.pi ** (0.5 * d) * s**d)
        if self.kind == "cauchy":
            return np.prod(1.0 / (math.pi * s * (1.0 + (x / s) ** 2)), axis=-1)
        r2 = np.sum(x * x, axis=-1)
        a = self.alpha
        log_norm = (math.log(2.0) + 0.5 * d * math.log(math.pi) - gammaln(0.5 * d)  # sphere area
                    + math.log(0.5) + (d - a) * math.log(s) + gammaln(0.5 * (d - a)))
        return r2 ** (-0.5 * a) * np.exp(-r2 / s**2 - log_norm)


# --- scenario container -----------------------------------------------------------

@dataclass
class Scenario:
    """A fully constructed coefficient set with everything needed to check,
    discretize and simulate it."""

    name: str
    params: dict
    cs: CoefficientSet
    measure: MeasureDensity
    envelope: Envelope | None
    doc: str
    battery_box: tuple
    validate: dict = field(default_factory=dict)
    resolvent: dict = field(default_factory=dict)
    simulate: dict = field(default_factory=dict)
    negative_control: bool = False
    warnings: list = field(default_factory=list)
    annulus_c: float | None = None
    exact_ou: bool = False
    config_path: str | None = None

    @property
    def dim(self):
        return self.cs.dim

    @property
    def finite(self):
        return self.measure.mode == "finite-normalized"

    def describe(self):
        return {"name": self.name, "params": dict(self.params), "dim": self.dim,
                "negative_control": self.negative_control, "warnings": list(self.warnings)}


def _box(d, half):
    return (-half * np.ones(d), half * np.ones(d))


_VALIDATE_DEFAULTS = {"M": 1.0, "N0": 2.0, "R_max": None, "n_samples": 4096, "ellipticity_box": 2.0,
                      "n_pairs": 20}


def _validate(**kw):
    out = dict(_VALIDATE_DEFAULTS)
    out.update(kw)
    return out


# --- built-ins -------------------------------------------------------------------

def _gauss_parts(d):
    return gaussian_density(d), identity_matrix(d)


def ou_gauss(d=2, psi0=1.0):
    """Ornstein-Uhlenbeck reference: A = I, B = 0, rho = exp(-|x|^2), constant psi.

    The drift is ``-x / psi0`` and mu_hat is Gaussian with covariance I/2.
    """
    d = int(d)
    rho, A = _gauss_parts(d)
    psi = constant_scalar(d, psi0, name="psi")
    cs = CoefficientSet(rho, psi, A, zero_vector(d), name="ou-gauss")
    Z = psi0 * math.pi ** (0.5 * d)
    env = Envelope("gaussian", d, 1.0, psi0 * math.pi ** (0.5 * d))
    return dict(cs=cs, measure=measure_of(cs, Z), envelope=env, battery_box=_box(d, 2.0),
                validate=_validate(), exact_ou=(psi0 == 1.0))


def ou_psi(d=2, amp=1.0):
    """Gaussian rho with the non-constant weight ``psi = 2 + amp cos(x_1)``.

    The drift becomes ``-x / psi`` and mu_hat is no longer Gaussian.
    """
    d = int(d)
    if not 0 <= amp < 2:
        raise ConfigParse("amp must satisfy 0 <= amp < 2 so that psi stays positive")
    rho, A = _gauss_parts(d)

    def fn(x):
        return 2.0 + amp * np.cos(x[..., 0])

    def grad(x):
        g = np.zeros_like(x)
        g[..., 0] = -amp * np.sin(x[..., 0])
        return g

    psi = ScalarField(d, fn, grad=grad, name="psi")
    cs = CoefficientSet(rho, psi, A, zero_vector(d), name="ou-psi")
    Z = math.pi ** (0.5 * d) * (2.0 + amp * math.exp(-0.25))
    env = Envelope("gaussian", d, 1.0, (2.0 + amp) * math.pi ** (0.5 * d))
    return dict(cs=cs, measure=measure_of(cs, Z), envelope=env, battery_box=_box(d, 2.0),
                validate=_validate())


def constant_antisymmetric(d, c):
    """Constant anti-symmetric matrix with ``C[0, d-1] = c``, ``C[d-1, 0] = -c``."""
    C = np.zeros((d, d))
    C[0, d - 1] = c
    C[d - 1, 0] = -c
    return MatrixField(d, lambda x: np.broadcast_to(C, x.shape + (d,)).copy(),
                       divergence=lambda x: np.zeros_like(x), name="C")


def ou_rotation(d=2, c=1.0):
    """OU with a rotational perturbation ``B = -C^T x`` from a constant
    anti-symmetric C; mu_hat stays N(0, I/2) but the process is non-reversible."""
    d = int(d)
    if d < 2:
        raise ConfigParse("ou-rotation needs d >= 2")
    rho, A = _gauss_parts(d)
    psi = constant_scalar(d, 1.0, name="psi")
    B = antisymmetric_divfree(rho, psi, constant_antisymmetric(d, c))
    cs = CoefficientSet(rho, psi, A, B, name="ou-rotation")
    Z = math.pi ** (0.5 * d)
    env = Envelope("gaussian", d, 1.0, Z)
    return dict(cs=cs, measure=measure_of(cs, Z), envelope=env, battery_box=_box(d, 2.0),
                validate=_validate(), annulus_c=1.0)


def _rotation_v(beta):
    def v(r):
        # v(0) = 2 by convention; C stays bounded at the origin
        safe = np.where(r > 0, r, 1.0)
        return np.where(r > 0, 2.0 + np.cos(safe ** (-beta)), 2.0)

    def dv_over_r(r):
        # grad v = beta sin(r^-beta) r^(-beta-2) x
        return beta * np.sin(r ** (-beta)) * r ** (-beta - 2.0)

    return v, dv_over_r


def singular_rotation(d=2, alpha=1.0, beta=0.1, phi=1.0):
    """Degenerate, singular example on a Gaussian rho.

    ``A = I``, ``psi = phi / |x|^alpha`` and B built from the anti-symmetric
    matrix with ``c_1d = v``, ``c_d1 = -v``, ``v = 2 + cos(|x|^-beta)``. The
    diffusion ``A_hat = |x|^alpha / phi I`` degenerates at the origin and the
    drift carries an ``|x|^(alpha - beta - 1)`` singularity there.
    """
    d = int(d)
    alpha, beta, phi = float(alpha), float(beta), float(phi)
    if d < 2:
        raise ConfigParse("singular-rotation needs d >= 2")
    if not 0.0 <= alpha < d:
        raise ConfigParse("alpha must satisfy 0 <= alpha < d")
    if not phi > 0:
        raise ConfigParse("phi must be positive")
    warnings = []
    if not 2.0 * (beta + 1.0) < d:
        warnings.append(f"2(beta + 1) = {2 * (beta + 1):g} >= d = {d}: the gradient of v is not locally "
                        "square integrable at the origin; checks still run on the punctured space")
    origin = [np.zeros(d)]
    rho = gaussian_density(d)
    A = identity_matrix(d)

    def psi_fn(x):
        return phi * np.sum(x * x, axis=-1) ** (-0.5 * alpha)

    def psi_grad(x):
        r2 = np.sum(x * x, axis=-1)
        return (-alpha * phi * r2 ** (-0.5 * alpha - 1.0))[..., None] * x

    psi = ScalarField(d, psi_fn, grad=psi_grad, singular_points=origin if alpha > 0 else (), name="psi")
    v, dv_over_r = _rotation_v(beta)

    def C_fn(x):
        r = np.linalg.norm(x, axis=-1)
        M = np.zeros(x.shape + (d,))
        vv = v(r)
        M[..., 0, d - 1] = vv
        M[..., d - 1, 0] = -vv
        return M

    def C_div(x):
        # column convention: (div C)_1 = -d_d v, (div C)_d = d_1 v
        g = dv_over_r(np.linalg.norm(x, axis=-1))
        out = np.zeros_like(x)
        out[..., 0] = -g * x[..., d - 1]
        out[..., d - 1] = g * x[..., 0]
        return out

    C = MatrixField(d, C_fn, divergence=C_div, singular_points=origin, name="C[v]")
    B = antisymmetric_divfree(rho, psi, C)
    cs = CoefficientSet(rho, psi, A, B, name="singular-rotation")
    sphere = math.exp(math.log(2.0) + 0.5 * d * math.log(math.pi) - gammaln(0.5 * d))
    Z = phi * sphere * 0.5 * math.exp(gammaln(0.5 * (d - alpha)))
    env = Envelope("radial-gaussian", d, 1.0, Z * (1.0 + 1e-12), alpha=alpha)
    return dict(cs=cs, measure=measure_of(cs, Z), envelope=env, battery_box=_box(d, 1.5),
                validate=_validate(), warnings=warnings, annulus_c=1.0)


def singular_rotation_drift(x, alpha=1.0, beta=0.1, phi=1.0):
    """Closed form of the forward drift of ``singular_rotation``.

    ``G = |x|^alpha / phi (-x + (beta/2 sin(|x|^-beta) |x|^(-beta-2) - v) J x)``
    with ``J x = (-x_d, 0, ..., 0, x_1)``.
    """
    x = np.asarray(x, dtype=float)
    d = x.shape[-1]
    r = np.linalg.norm(x, axis=-1)
    v, dv_over_r = _rotation_v(beta)
    Jx = np.zeros_like(x)
    Jx[..., 0] = -x[..., d - 1]
    Jx[..., d - 1] = x[..., 0]
    coef = 0.5 * dv_over_r(r) - v(r)
    return (r**alpha / phi)[..., None] * (-x + coef[..., None] * Jx)


def constructed_1d(a0=1.0, a2=1.0, kappa=1.0, psi0=1.0):
    """One-dimensional density built from a prescribed drift.

    With ``a(y) = a0 + a2 y^2``, constant psi and target drift
    ``g_hat(y) = -kappa y``, rho solves ``psi g_hat = a'/2 + a rho'/(2 rho)``
    so that B = 0. For a0 = a2 = kappa = psi0 = 1, rho = (1 + x^2)^-2.
    """
    a0, a2, kappa, psi0 = float(a0), float(a2), float(kappa), float(psi0)
    if not (a0 > 0 and a2 > 0 and kappa > 0 and psi0 > 0):
        raise ConfigParse("constructed-1d needs a0, a2, kappa, psi0 > 0")
    a = ScalarField(1, lambda x: a0 + a2 * x[..., 0] ** 2, grad=lambda x: 2.0 * a2 * x,
                    hess=lambda x: np.full(x.shape + (1,), 2.0 * a2), name="a")
    psi = constant_scalar(1, psi0, name="psi")
    g_hat = ScalarField(1, lambda x: -kappa * x[..., 0], grad=lambda x: np.full_like(x, -kappa), name="g_hat")
    rho = constructed_density_1d(a, psi, g_hat)
    A = MatrixField(1, lambda x: (a0 + a2 * x[..., 0] ** 2)[..., None, None], symmetric=True,
                    divergence=lambda x: 2.0 * a2 * x, diagonal=True, name="a")
    cs = CoefficientSet(rho, psi, A, zero_vector(1), name="constructed-1d")
    # rho = (1 + (a2/a0) y^2)^-p with p = (psi0 kappa + a2) / a2 >= 1
    p = (psi0 * kappa + a2) / a2
    s = math.sqrt(a0 / a2)
    Z = psi0 * s * math.sqrt(math.pi) * math.exp(gammaln(p - 0.5) - gammaln(p))
    env = Envelope("cauchy", 1, s, psi0 * math.pi * s * (1.0 + 1e-12))
    # (a0 + a2 r^2) / psi0 needs M = 2 at r = N0 = 2 in the divergence-free form
    return dict(cs=cs, measure=measure_of(cs, Z), envelope=env, battery_box=_box(1, 3.0),
                validate=_validate(M=2.0), params_closed_form={"p": p, "s": s},
                # heavy tails: box increments of the global resolvent decay like L^-4
                resolvent={"boxes": [1.0, 2.0, 4.0, 8.0, 16.0, 32.0, 64.0, 128.0], "n": 8})


def brownian(d=1):
    """Brownian motion: rho = psi = 1, A = I, B = 0; mu_hat is Lebesgue measure."""
    d = int(d)
    one = constant_scalar(d, 1.0, name="rho")
    cs = CoefficientSet(one, constant_scalar(d, 1.0, name="psi"), identity_matrix(d), zero_vector(d),
                        name="brownian")
    return dict(cs=cs, measure=measure_of(cs), envelope=None, battery_box=_box(d, 2.0),
                validate=_validate(), annulus_c=float(d) + 1.0)


def broken_drift(d=2):
    """Negative control: OU coefficients with ``B = x``, which is not
    divergence free with respect to the Gaussian mu_hat."""
    d = int(d)
    rho, A = _gauss_parts(d)
    B = VectorField(d, lambda x: np.array(x, dtype=float), name="B=x")
    cs = CoefficientSet(rho, constant_scalar(d, 1.0, name="psi"), A, B, name="broken-drift")
    Z = math.pi ** (0.5 * d)
    return dict(cs=cs, measure=measure_of(cs, Z), envelope=Envelope("gaussian", d, 1.0, Z),
                battery_box=_box(d, 2.0), validate=_validate(), negative_control=True)


def shifted_ou(d=2, shift=0.5):
    """Negative control: OU with a constant push ``B = (shift, 0, ..., 0)``."""
    d = int(d)
    rho, A = _gauss_parts(d)
    e = np.zeros(d)
    e[0] = shift
    B = VectorField(d, lambda x: np.broadcast_to(e, x.shape).copy(), name="B=shift")
    cs = CoefficientSet(rho, constant_scalar(d, 1.0, name="psi"), A, B, name="shifted-ou")
    Z = math.pi ** (0.5 * d)
    return dict(cs=cs, measure=measure_of(cs, Z), envelope=Envelope("gaussian", d, 1.0, Z),
                battery_box=_box(d, 2.0), validate=_validate(), negative_control=True)


def superlinear_drift(d=2):
    """Negative control: total drift ``G = x |x|^2`` (super-linear, outward)."""
    d = int(d)
    rho, A = _gauss_parts(d)
    # beta = -x for this rho, so B = x + x |x|^2 gives G = x |x|^2
    B = VectorField(d, lambda x: x * (1.0 + np.sum(x * x, axis=-1))[..., None], name="B=x(1+|x|^2)")
    cs = CoefficientSet(rho, constant_scalar(d, 1.0, name="psi"), A, B, name="superlinear-drift")
    Z = math.pi ** (0.5 * d)
    return dict(cs=cs, measure=measure_of(cs, Z), envelope=Envelope("gaussian", d, 1.0, Z),
                battery_box=_box(d, 2.0), validate=_validate(), negative_control=True)


REGISTRY = {
    "ou-gauss": (ou_gauss, {"d": 2, "psi0": 1.0}),
    "ou-psi": (ou_psi, {"d": 2, "amp": 1.0}),
    "ou-rotation": (ou_rotation, {"d": 2, "c": 1.0}),
    "singular-rotation": (singular_rotation, {"d": 2, "alpha": 1.0, "beta": 0.1, "phi": 1.0}),
    "constructed-1d": (constructed_1d, {"a0": 1.0, "a2": 1.0, "kappa": 1.0, "psi0": 1.0}),
    "brownian": (brownian, {"d": 1}),
    "broken-drift": (broken_drift, {"d": 2}),
    "shifted-ou": (shifted_ou, {"d": 2, "shift": 0.5}),
    "superlinear-drift": (superlinear_drift, {"d": 2}),
}

POSITIVE = ("ou-gauss", "ou-psi", "ou-rotation", "singular-rotation", "constructed-1d")
NEGATIVE = ("broken-drift", "shifted-ou", "superlinear-drift")

SECTIONS = {
    "scenario": {"name"},
    "params": None,  # checked against the scenario's own parameters
    "validate": set(_VALIDATE_DEFAULTS),
    "resolvent": {"boxes", "n", "alpha", "trials"},
    "simulate": {"dt", "T", "paths", "seed", "tests", "record_stride"},
}


def build(name, params=None, sections=None, _where=None):
    """Construct a registered scenario with parameter overrides."""
    if name not in REGISTRY:
        raise UnknownScenario(f"unknown scenario {name!r}; known: {', '.join(sorted(REGISTRY))}")
    ctor, defaults = REGISTRY[name]
    params = dict(params or {})
    for k in params:
        if k not in defaults:
            line, col = (_where or {}).get(("params", k), (None, None))
            raise ConfigParse(f"unknown parameter {k!r} for scenario {name!r}", line, col)
    full = {**defaults, **params}
    parts = ctor(**full)
    parts.pop("params_closed_form", None)
    doc = (ctor.__doc__ or "").strip()
    sc = Scenario(name=name, params=full, doc=doc, **parts)
    sections = sections or {}
    sc.validate.update(sections.get("validate", {}))
    sc.resolvent.update(sections.get("resolvent", {}))
    sc.simulate.update(sections.get("simulate", {}))
    return sc


def _parse_value(text):
    low = text.lower()
    if low in ("true", "false"):
        return low == "true"
    try:
        return int(text)
    except ValueError:
        pass
    try:
        return float(text)
    except ValueError:
        return text


def parse_name_string(spec):
    """``"name key=value ..."`` into ``(name, params)``; ConfigParse on bad tokens."""
    tokens = list(re.finditer(r"\S+", spec))
    if not tokens:
        raise ConfigParse("empty scenario string", 1, 1)
    name = tokens[0].group()
    params = {}
    where = {}
    for m in tokens[1:]:
        tok = m.group()
        if "=" not in tok:
            raise ConfigParse(f"expected key=value, got {tok!r}", 1, m.start() + 1)
        k, v = tok.split("=", 1)
        params[k] = _parse_value(v)
        where[("params", k)] = (1, m.start() + 1)
    return name, params, where


def _locate(text, key):
    pat = re.compile(r"^\s*(?:[\w.-]+\.)?" + re.escape(key) + r"\s*=", re.M)
    m = pat.search(text)
    if not m:
        return None, None
    line = text.count("\n", 0, m.start()) + 1
    col = m.start() - (text.rfind("\n", 0, m.start()) + 1) + 1
    col += len(m.group()) - len(m.group().lstrip())
    return line, col


def parse_config(text):
    """Parse TOML config text into ``(name, params, sections, where)``."""
    try:
        data = tomli.loads(text)
    except tomli.TOMLDecodeError as exc:
        line = getattr(exc, "lineno", None)
        col = getattr(exc, "colno", None)
        if line is None:
            m = re.search(r"line (\d+), column (\d+)", str(exc))
            if m:
                line, col = int(m.group(1)), int(m.group(2))
        raise ConfigParse(f"invalid config: {getattr(exc, 'msg', exc)}", line, col) from None
    where = {}
    for sec, keys in data.items():
        if sec not in SECTIONS:
            line, col = _locate_section(text, sec)
            raise ConfigParse(f"unknown section {sec!r}", line, col)
        if not isinstance(keys, dict):
            raise ConfigParse(f"{sec!r} must be a table", *_locate(text, sec))
        allowed = SECTIONS[sec]
        for k in keys:
            loc = _locate(text, k)
            where[(sec, k)] = loc
            if allowed is not None and k not in allowed:
                raise ConfigParse(f"unknown key {sec}.{k}", *loc)
    scen = data.get("scenario", {})
    if "name" not in scen:
        raise ConfigParse("config needs scenario.name", 1, 1)
    sections = {s: dict(data.get(s, {})) for s in ("validate", "resolvent", "simulate")}
    return scen["name"], dict(data.get("params", {})), sections, where


def _locate_section(text, sec):
    for i, line in enumerate(text.splitlines(), 1):
        m = re.match(r"\s*\[\s*" + re.escape(sec) + r"\s*\]", line) or re.match(
            r"\s*" + re.escape(sec) + r"\.", line)
        if m:
            return i, m.start() + 1 + (len(line) - len(line.lstrip()))
    return None, None


def load_scenario(name_or_config_path):
    """Scenario from a registered name (with optional ``key=value`` tokens)
    or from a TOML config file."""
    spec = str(name_or_config_path)
    if spec.endswith(".toml") or os.path.isfile(spec):
        try:
            with open(spec) as fh:
                text = fh.read()
        except OSError as exc:
            raise ConfigParse(f"cannot read config {spec}: {exc}") from None
        name, params, sections, where = parse_config(text)
        sc = build(name, params, sections, where)
        sc.config_path = os.path.abspath(spec)
        return sc
    name, params, where = parse_name_string(spec)
    return build(name, params, None, where)


def normalization_by_quadrature(sc: Scenario, half=8.0, n=400):
    """Independent check of the declared normalization for d <= 2 (testing aid)."""
    d = sc.dim
    if d == 1:
        return integrate.quad(lambda t: float(sc.measure(np.array([[t]]))[0]), -np.inf, np.inf,
                              limit=400, epsabs=1e-13, epsrel=1e-12)[0]
    if d == 2:
        return integrate.dblquad(lambda y, x: float(sc.measure(np.array([[x, y]]))[0]) if (x or y) else 0.0,
                                 -half, half, -half, half, epsabs=1e-10, epsrel=1e-10)[0]
    raise ValueError("normalization_by_quadrature supports d <= 2")
