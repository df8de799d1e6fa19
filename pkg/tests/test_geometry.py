import time

import numpy as np
import pytest

from orbitpass.errors import ExpressionError, GeometryError
from orbitpass.expressions import ScalarExpression
from orbitpass.geometry import (
    ChartDomain,
    GeometryBundle,
    MetricField,
    conformal_metric,
    double_well_potential,
    expression_potential,
    flat_metric,
    harmonic_potential,
    linear_potential,
    regularity_scan,
    warped_metric,
)


# ---------------------------------------------------------------------------
# metric evaluation


def test_flat_metric_is_identity():
    m = flat_metric(3)
    q = np.array([0.3, -1.0, 2.0])
    assert np.allclose(m.matrix(q), np.eye(3))


def test_conformal_metric_values():
    m = conformal_metric(2, "q1")
    assert np.allclose(m.matrix(np.zeros(2)), np.eye(2))
    assert np.allclose(m.matrix(np.array([1.0, 0.0])), np.e ** 2 * np.eye(2))


def test_metric_at_rejects_non_spd():
    def bad(q):
        q = np.asarray(q, dtype=float)
        g = np.zeros(q.shape + (2,))
        g[..., 0, 0] = -1.0
        g[..., 1, 1] = 1.0
        return g

    chart = ChartDomain(2)
    bundle = GeometryBundle(chart, MetricField(2, bad), harmonic_potential(2))
    with pytest.raises(GeometryError):
        bundle.metric_at(np.zeros(2))


# ---------------------------------------------------------------------------
# Christoffel symbols


def christoffel_fd_oracle(metric, q, h=1e-5):
    """Independent evaluation of Gamma^k_ij = 1/2 g^{kl}(d_i g_kj + d_j g_ik - d_l g_ij)."""
    n = metric.dimension
    dg = np.zeros((n, n, n))
    for a in range(n):
        qp = np.array(q, dtype=float)
        qm = np.array(q, dtype=float)
        qp[a] += h
        qm[a] -= h
        dg[a] = (metric.matrix(qp) - metric.matrix(qm)) / (2 * h)
    ginv = np.linalg.inv(metric.matrix(np.asarray(q, dtype=float)))
    gamma = np.zeros((n, n, n))
    for k in range(n):
        for i in range(n):
            for j in range(n):
                gamma[k, i, j] = 0.5 * sum(
                    ginv[k, l] * (dg[i, l, j] + dg[j, i, l] - dg[l, i, j])
                    for l in range(n)
                )
    return gamma


def test_flat_christoffel_vanishes():
    m = flat_metric(2)
    g = m.christoffel(np.array([1.2, -0.7]))
    assert np.max(np.abs(g)) < 1e-10


def test_conformal_christoffel_closed_form():
    # g = e^{2 q1} delta in 2-d: Gamma^1_11 = 1, Gamma^1_22 = -1, Gamma^2_12 = 1, Gamma^2_22 = 0
    m = conformal_metric(2, "q1")
    q = np.zeros(2)
    gamma = m.christoffel(q)
    assert gamma[0, 0, 0] == pytest.approx(1.0, abs=1e-6)
    assert gamma[0, 1, 1] == pytest.approx(-1.0, abs=1e-6)
    assert gamma[1, 0, 1] == pytest.approx(1.0, abs=1e-6)
    assert gamma[1, 1, 1] == pytest.approx(0.0, abs=1e-6)
    assert np.allclose(gamma, christoffel_fd_oracle(m, q), atol=1e-6)
    assert np.allclose(gamma, np.swapaxes(gamma, 1, 2))


def test_warped_cylinder_christoffel():
    # g = f(r) dphi^2 + dr^2 with f = r^2: Gamma^r_{phi phi} = -r, Gamma^phi_{r phi} = 1/r
    m = warped_metric(2, "q2^2", warp_axis=0)
    q = np.array([0.5, 2.0])
    gamma = m.christoffel(q)
    assert gamma[1, 0, 0] == pytest.approx(-2.0, abs=1e-6)
    assert gamma[0, 1, 0] == pytest.approx(0.5, abs=1e-6)
    assert np.allclose(gamma, christoffel_fd_oracle(m, q), atol=1e-6)


def test_christoffel_batched_matches_single(conformal2d):
    rng = np.random.default_rng(1)
    pts = rng.uniform(-1, 1, size=(7, 2))
    batch = conformal2d.metric.christoffel(pts)
    for i, q in enumerate(pts):
        assert np.allclose(batch[i], conformal2d.metric.christoffel(q), atol=1e-12)


# ---------------------------------------------------------------------------
# potential calculus


def test_grad_potential_harmonic_1d(flat1d_osc):
    assert flat1d_osc.grad_potential(np.array([1.0])) == pytest.approx(1.0)
    assert flat1d_osc.grad_potential(np.array([0.0])) == pytest.approx(0.0)


def test_grad_potential_flat_2d(flat2d_osc):
    g = flat2d_osc.grad_potential(np.array([0.0, 1.0]))
    assert np.allclose(g, [0.0, 1.0])


def test_hess_flat_harmonic(flat1d_osc):
    q = np.array([0.37])
    assert flat1d_osc.hess_potential(q) == pytest.approx(1.0)
    assert flat1d_osc.hess_norm(q) == pytest.approx(1.0)


def test_hess_linear_zero():
    chart = ChartDomain(2)
    b = GeometryBundle(chart, flat_metric(2), linear_potential(2, [1.0, 0.0]))
    assert np.allclose(b.hess_potential(np.array([0.4, -2.0])), 0.0)
    assert b.hess_norm(np.array([0.4, -2.0])) == pytest.approx(0.0, abs=1e-12)


def hess_fd_oracle(bundle, q, h=1e-4):
    """Second-order central differences of V plus the Christoffel correction."""
    n = bundle.dimension
    q = np.asarray(q, dtype=float)
    H = np.zeros((n, n))
    v0 = bundle.potential.value(q)
    for i in range(n):
        for j in range(n):
            qpp = q.copy(); qpp[i] += h; qpp[j] += h
            qpm = q.copy(); qpm[i] += h; qpm[j] -= h
            qmp = q.copy(); qmp[i] -= h; qmp[j] += h
            qmm = q.copy(); qmm[i] -= h; qmm[j] -= h
            H[i, j] = (bundle.potential.value(qpp) - bundle.potential.value(qpm)
                       - bundle.potential.value(qmp) + bundle.potential.value(qmm)) / (4 * h * h)
    gamma = christoffel_fd_oracle(bundle.metric, q)
    dV = np.zeros(n)
    for i in range(n):
        qp = q.copy(); qp[i] += h
        qm = q.copy(); qm[i] -= h
        dV[i] = (bundle.potential.value(qp) - bundle.potential.value(qm)) / (2 * h)
    return H - np.einsum("kij,k->ij", gamma, dV)


def test_hess_norm_conformal_matches_oracle(conformal2d):
    q = np.zeros(2)
    H_oracle = hess_fd_oracle(conformal2d, q)
    assert np.allclose(conformal2d.hess_potential(q), H_oracle, atol=1e-6)
    g = conformal2d.metric.matrix(q)
    L = np.linalg.cholesky(g)
    M = np.linalg.solve(L, np.linalg.solve(L, H_oracle).T)
    norm_oracle = np.max(np.abs(np.linalg.eigvalsh(0.5 * (M + M.T))))
    assert conformal2d.hess_norm(q) == pytest.approx(norm_oracle, abs=1e-6)


@pytest.mark.parametrize("pot", [
    harmonic_potential(2, k=1.3, v0=0.4),
    linear_potential(2, [0.7, -0.2], 0.1),
    double_well_potential(2, a=0.8, width=1.1, v0=0.3),
])
def test_analytic_vs_fd_derivatives(pot):
    rng = np.random.default_rng(3)
    pts = rng.uniform(-2, 2, size=(50, 2))
    g_an = pot.grad_coords(pts)
    g_fd = pot.fd_grad_coords(pts, h=1e-4)
    scale = np.maximum(np.abs(g_an), 1.0)
    assert np.max(np.abs(g_an - g_fd) / scale) < 1e-6
    h_an = pot.hess_coords(pts)
    h_fd = pot.fd_hess_coords(pts, h=1e-4)
    hscale = np.maximum(np.abs(h_an), 1.0)
    assert np.max(np.abs(h_an - h_fd) / hscale) < 1e-6


# ---------------------------------------------------------------------------
# nu-shrinking function


def test_nu_shrink_values(flat1d_osc):
    q = np.array([0.0])
    assert flat1d_osc.nu_shrink_value(q) == pytest.approx(-0.5)
    assert bool(flat1d_osc.nu_member(q, 0.3))
    q_zero = np.array([1.0])  # V = 0 there
    assert flat1d_osc.nu_shrink_value(q_zero) == pytest.approx(0.0, abs=1e-12)
    assert not bool(flat1d_osc.nu_member(q_zero, 1e-6))


# ---------------------------------------------------------------------------
# Hamiltonian and its vector field


def test_hamiltonian_flat_oscillator(flat1d_osc):
    H = flat1d_osc.hamiltonian(np.array([1.0]), np.array([0.0]))
    assert H == pytest.approx(0.0, abs=1e-14)
    dq, dth = flat1d_osc.hamiltonian_vector_field(np.array([1.0]), np.array([0.0]))
    assert np.allclose(dq, [0.0]) and np.allclose(dth, [-1.0])
    H0 = flat1d_osc.hamiltonian(np.zeros(1), np.zeros(1))
    assert H0 == pytest.approx(-0.5)
    dq0, dth0 = flat1d_osc.hamiltonian_vector_field(np.zeros(1), np.zeros(1))
    assert np.allclose(dq0, 0.0) and np.allclose(dth0, 0.0)


@pytest.mark.parametrize("fixture", ["conformal2d", "warped_cylinder"])
def test_dh_of_xh_vanishes(fixture, request):
    bundle = request.getfixturevalue(fixture)
    rng = np.random.default_rng(11)
    q = rng.uniform(0.3, 2.0, size=(200, 2))
    th = rng.uniform(-2.0, 2.0, size=(200, 2))
    dq, dth = bundle.hamiltonian_vector_field(q, th)
    h = 1e-4
    val = np.zeros(200)
    for i in range(2):
        qp = q.copy(); qp[:, i] += h
        qm = q.copy(); qm[:, i] -= h
        val += (bundle.hamiltonian(qp, th) - bundle.hamiltonian(qm, th)) / (2 * h) * dq[:, i]
        tp = th.copy(); tp[:, i] += h
        tm = th.copy(); tm[:, i] -= h
        val += (bundle.hamiltonian(q, tp) - bundle.hamiltonian(q, tm)) / (2 * h) * dth[:, i]
    bound = 1e-8 * (1.0 + np.sum(th * th, axis=-1))
    assert np.all(np.abs(val) < bound)


def test_rk4_energy_drift_order(conformal2d):
    q = np.array([0.4, -0.3])
    th = np.array([0.8, 0.5])
    H0 = conformal2d.hamiltonian(q, th)

    def drift(dt):
        q1, t1 = conformal2d.flow_rk4(q, th, dt)
        return abs(conformal2d.hamiltonian(q1, t1) - H0)

    d1, d2 = drift(0.2), drift(0.1)
    assert d1 < 1e-6
    assert d1 / max(d2, 1e-300) > 10.0  # ~ 2^5 for an O(dt^5) local error


# ---------------------------------------------------------------------------
# regularity scan


def test_regularity_pass_harmonic(flat2d_osc):
    t0 = time.time()
    rep = regularity_scan(flat2d_osc, r_k=2.0, shells=5, samples_per_shell=150,
                          r_max=10.0, seed=0)
    assert time.time() - t0 < 5.0
    assert rep.passed
    ratios = [s.max_ratio for s in rep.shells]
    assert all(b < a for a, b in zip(ratios, ratios[1:]))
    # || Hess || / |grad| = 1/r on the harmonic potential
    assert ratios[0] == pytest.approx(0.5, rel=0.1)
    assert rep.v_inf >= 2.0


def test_regularity_fail_sin():
    chart = ChartDomain(1, box=[[-40.0, 40.0]])
    b = GeometryBundle(chart, flat_metric(1), expression_potential(1, "sin(q1)"))
    rep = regularity_scan(b, r_k=2.0, shells=5, samples_per_shell=200,
                          r_max=30.0, seed=1)
    assert not rep.passed


def test_regularity_pass_linear():
    chart = ChartDomain(1, box=[[-20.0, 20.0]])
    b = GeometryBundle(chart, flat_metric(1), linear_potential(1, [1.0]))
    rep = regularity_scan(b, r_k=1.0, shells=4, samples_per_shell=100,
                          r_max=10.0, seed=2)
    assert rep.passed
    assert rep.v_inf == pytest.approx(1.0, rel=1e-9)
    assert rep.ratio_final == pytest.approx(0.0, abs=1e-9)


def test_regularity_requires_unbounded_direction():
    chart = ChartDomain(1, periods=[2 * np.pi])
    b = GeometryBundle(chart, flat_metric(1), expression_potential(1, "sin(q1)"))
    with pytest.raises(GeometryError):
        regularity_scan(b, r_k=1.0, shells=3, samples_per_shell=10)


# ---------------------------------------------------------------------------
# expressions


def test_expression_matches_harmonic_preset():
    expr = expression_potential(1, "0.5*q1^2 - 0.5")
    ref = harmonic_potential(1, k=1.0, v0=0.5)
    rng = np.random.default_rng(5)
    pts = rng.uniform(-3, 3, size=(1000, 1))
    assert np.allclose(expr.value(pts), ref.value(pts), atol=1e-12)


@pytest.mark.parametrize("bad", [
    "q3 + 1",            # variable beyond dimension
    "import os",         # statement
    "foo(q1)",           # unknown function
    "q1 @ q1",           # disallowed operator
    "lambda: 1",         # lambda
    "0.5*q1^2 -",        # syntax error
])
def test_expression_rejects(bad):
    with pytest.raises(ExpressionError):
        ScalarExpression(bad, 2)


def test_expression_functions_and_power():
    e = ScalarExpression("exp(q1) + sin(q2)*cos(q2) + sqrt(q1^2)", 2)
    q = np.array([0.5, 0.25])
    expected = np.exp(0.5) + np.sin(0.25) * np.cos(0.25) + 0.5
    assert e(q) == pytest.approx(expected, rel=1e-14)


# ---------------------------------------------------------------------------
# chart


def test_chart_wrapping():
    chart = ChartDomain(2, periods=[2 * np.pi, None])
    q = np.array([7.0, 3.0])
    w = chart.wrap(q)
    assert w[0] == pytest.approx(7.0 - 2 * np.pi)
    assert w[1] == 3.0
    d = chart.wrap_difference(np.array([6.0, 6.0]))
    assert d[0] == pytest.approx(6.0 - 2 * np.pi)
    assert d[1] == 6.0


def test_chart_invariants():
    with pytest.raises(GeometryError):
        ChartDomain(0)
    with pytest.raises(GeometryError):
        ChartDomain(1, periods=[-1.0])
    with pytest.raises(GeometryError):
        ChartDomain(1, box=[[1.0, -1.0]])
