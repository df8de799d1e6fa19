import numpy as np
import pytest

from orbitpass.contact import (
    a_kappa_bound,
    contact_function,
    contact_vector_field,
    sample_energy_surface,
    theta_of_xh,
    uniform_contact_scan,
    xh_of_f_analytic,
    xh_of_f_oracle,
)
from orbitpass.errors import GeometryError
from orbitpass.geometry import (
    ChartDomain,
    GeometryBundle,
    cutoff_saddle_potential,
    expression_potential,
    flat_metric,
)


# ---------------------------------------------------------------------------
# the vector field v and the linear function f


def test_contact_vector_field_values(flat1d_osc):
    assert contact_vector_field(flat1d_osc, np.zeros(1)) == pytest.approx(0.0)
    # grad V = q: at q=1, v = -1/(1+1)
    assert contact_vector_field(flat1d_osc, np.array([1.0]))[0] == pytest.approx(-0.5)


def test_contact_vector_field_bounded_and_decaying(flat1d_osc):
    q = np.linspace(0.1, 50, 400)[:, None]
    v = np.abs(contact_vector_field(flat1d_osc, q)[:, 0])
    assert np.all(v <= 0.5 + 1e-15)
    # |v| = x/(1+x^2) decreases monotonically past its maximum at |grad V| = 1
    tail = v[q[:, 0] > 1.0]
    assert np.all(np.diff(tail) < 0)


def test_contact_function_linear(flat1d_osc):
    q = np.array([1.0])
    assert contact_function(flat1d_osc, q, np.zeros(1)) == pytest.approx(0.0)
    f1 = contact_function(flat1d_osc, q, np.array([1.0]))
    assert f1 == pytest.approx(-0.5)
    f2 = contact_function(flat1d_osc, q, np.array([2.0]))
    assert f2 == pytest.approx(2.0 * f1, rel=1e-15)


def test_contact_function_linearity_random(conformal2d):
    rng = np.random.default_rng(0)
    q = rng.uniform(-1, 1, size=(100, 2))
    th = rng.uniform(-2, 2, size=(100, 2))
    a = rng.uniform(-3, 3, size=100)
    f = contact_function(conformal2d, q, th)
    fa = contact_function(conformal2d, q, a[:, None] * th)
    assert np.allclose(fa, a * f, rtol=0, atol=1e-14 * np.max(np.abs(f) * np.abs(a) + 1))


# ---------------------------------------------------------------------------
# X_H(f): closed form vs flow oracle


def test_xh_of_f_oscillator_values(flat1d_osc):
    assert xh_of_f_analytic(flat1d_osc, np.array([1.0]), np.array([0.0])) == pytest.approx(0.5)
    assert xh_of_f_analytic(flat1d_osc, np.array([0.0]), np.array([1.0])) == pytest.approx(-1.0)


def test_xh_of_f_zero_when_flat_potential():
    chart = ChartDomain(1)
    b = GeometryBundle(chart, flat_metric(1), expression_potential(1, "q1*0 + 1"))
    # grad V = 0 and Hess V = 0 everywhere
    assert xh_of_f_analytic(b, np.array([0.3]), np.array([0.7])) == pytest.approx(0.0, abs=1e-9)


def test_xh_of_f_oracle_oscillator(flat1d_osc):
    o1 = xh_of_f_oracle(flat1d_osc, np.array([1.0]), np.array([0.0]), delta=1e-4)
    assert o1 == pytest.approx(0.5, abs=1e-7)
    o2 = xh_of_f_oracle(flat1d_osc, np.array([0.0]), np.array([1.0]), delta=1e-4)
    assert o2 == pytest.approx(-1.0, abs=1e-7)


@pytest.mark.parametrize("fixture,n_pts", [("flat2d_osc", 1000), ("conformal2d", 1000)])
def test_xh_analytic_matches_oracle(fixture, n_pts, request):
    bundle = request.getfixturevalue(fixture)
    rng = np.random.default_rng(42)
    q = rng.uniform(-1.5, 1.5, size=(n_pts, 2))
    th = rng.uniform(-1.5, 1.5, size=(n_pts, 2))
    a = xh_of_f_analytic(bundle, q, th)
    o = xh_of_f_oracle(bundle, q, th, delta=1e-4)
    # relative where the value is O(1) or larger, absolute 1e-5 near zero
    # (the spec's conformal cross-check example is stated absolutely)
    assert np.all(np.abs(a - o) <= 1e-5 * np.maximum.reduce(
        [np.abs(a), np.abs(o), np.ones_like(a)]))


# ---------------------------------------------------------------------------
# Theta(X_H)


def test_theta_of_xh_values(flat1d_osc):
    k = 1.0 / 6.0
    t1 = theta_of_xh(flat1d_osc, np.array([1.0]), np.array([0.0]), k)
    assert t1 == pytest.approx(1.0 / 12.0)
    t2 = theta_of_xh(flat1d_osc, np.array([0.0]), np.array([1.0]), k)
    assert t2 == pytest.approx(5.0 / 6.0)
    # degenerate locus: theta = 0 at a critical point of V
    t3 = theta_of_xh(flat1d_osc, np.zeros(1), np.zeros(1), k)
    assert t3 == pytest.approx(0.0, abs=1e-14)


@pytest.mark.parametrize("fixture", ["flat1d_osc", "conformal2d"])
def test_theta_lower_bound_inequality(fixture, request):
    # Theta(X_H) >= 1/2 |theta|^2 + kappa |grad V|^2/(1+|grad V|^2) for kappa <= kappa0
    bundle = request.getfixturevalue(fixture)
    rng = np.random.default_rng(7)
    n = bundle.dimension
    q = rng.uniform(-2, 2, size=(800, n))
    th = rng.uniform(-2, 2, size=(800, n))
    hess = bundle.hess_norm(q)
    n2 = bundle.grad_norm2(q)
    big_c = 1.1 * np.max(3.0 * hess / (1.0 + n2))
    kappa = 1.0 / (2.0 * big_c)
    if bundle.metric.is_flat:
        lam = np.sum(th * th, axis=-1)
    else:
        ginv = bundle.metric.inverse(q)
        lam = np.einsum("...i,...ij,...j->...", th, ginv, th)
    lhs = theta_of_xh(bundle, q, th, kappa)
    rhs = 0.5 * lam + kappa * n2 / (1.0 + n2)
    assert np.min(lhs - rhs) >= -1e-9


def test_a_kappa_monotone_in_kappa():
    kappas = np.linspace(1e-3, 0.5, 40)
    vals = [a_kappa_bound(k, 2.0, 0.9, 0.05) for k in kappas]
    assert all(b >= a - 1e-15 for a, b in zip(vals, vals[1:]))


# ---------------------------------------------------------------------------
# the scan


def test_surface_sampler_energy_identity(flat2d_osc):
    rng = np.random.default_rng(3)
    q, th = sample_energy_surface(flat2d_osc, -0.05, rng, 200)
    H = flat2d_osc.hamiltonian(q, th)
    assert np.allclose(H, -0.05, atol=1e-12)


def test_surface_sampler_empty_errors(flat2d_osc):
    rng = np.random.default_rng(3)
    with pytest.raises(GeometryError):
        sample_energy_surface(flat2d_osc, -10.0, rng, 10)


def test_scan_oscillator_passes(flat1d_osc):
    rep = uniform_contact_scan(flat1d_osc, eps0=0.05, kappa=1.0 / 6.0,
                               samples_per_level=300, r_k=2.0, seed=0)
    assert rep.passed and not rep.advisory
    assert rep.sampled_min >= rep.a_kappa - 1e-9
    assert rep.a_kappa == pytest.approx(0.05)  # eps0 is the active minimum here
    assert rep.v_zero == pytest.approx(np.sqrt(0.8), abs=5e-3)


def test_scan_auto_kappa_is_kappa0(flat1d_osc):
    rep = uniform_contact_scan(flat1d_osc, eps0=0.05, samples_per_level=100, seed=1)
    assert rep.kappa_was_auto
    assert rep.kappa == rep.kappa0
    # C = sup 3/(1+q^2) = 3, inflated by the 10% margin
    assert rep.kappa0 == pytest.approx(1.0 / 6.6, rel=1e-6)
    assert rep.kappa0 <= 1.0 / 6.0


def test_scan_degenerate_zero_set_fails():
    # V = q^2 (q - 1): grad V = 0 at the origin, which lies on {V = 0}
    chart = ChartDomain(1, box=[[-0.8, 1.5]])
    b = GeometryBundle(chart, flat_metric(1), expression_potential(1, "q1^2*(q1 - 1)"))
    rep = uniform_contact_scan(b, eps0=0.02, samples_per_level=200, r_k=1.2, seed=2,
                               v_inf=1.0)
    assert not rep.passed
    assert rep.v_zero < 1e-5


def test_scan_cutoff_saddle_region_positive():
    # indefinite quadratic away from the cutoff: every sample gives Theta(X_H) > 0
    chart = ChartDomain(2, box=[[-6.0, 6.0], [-6.0, 6.0]])
    b = GeometryBundle(chart, flat_metric(2), cutoff_saddle_potential(2, n_plus=1, c=1.0))
    rng = np.random.default_rng(9)
    pts = rng.uniform(2.5, 5.5, size=(500, 2)) * rng.choice([-1.0, 1.0], size=(500, 2))
    hess = b.hess_norm(pts)
    n2 = b.grad_norm2(pts)
    big_c = np.max(3.0 * hess / (1.0 + n2))
    kappa0 = 1.0 / (2.0 * big_c)
    th = rng.uniform(-2, 2, size=(500, 2))
    vals = theta_of_xh(b, pts, th, kappa0)
    zero_momentum = np.sum(th * th, axis=-1) < 1e-12
    assert np.all(vals[~zero_momentum] > 0.0)
    assert np.all(vals > -1e-12)
