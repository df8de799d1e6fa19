import numpy as np
import pytest

from orbitpass.errors import OrbitPassError
from orbitpass.loops import LoopCalculus, LoopPoint, TangentField
from orbitpass.penalty import (
    PenaltySchedule,
    hamiltonian_level,
    level_residual,
    penalized_action,
    penalized_variation,
    penalty_term,
    ps_identity_residuals,
    tau_bound_check,
)

from test_loops import cos_loop, constant_loop, discrete_omega, random_band_limited


def oscillator_point(bundle, n=128):
    return LoopPoint(cos_loop(n, bundle.chart), np.log(discrete_omega(n)))


def test_penalized_reduces_to_action_at_zero(flat1d_osc):
    calc = LoopCalculus(flat1d_osc)
    point = oscillator_point(flat1d_osc)
    assert penalized_action(calc, point, 0.0) == calc.action(point)


def test_penalty_minimized_over_tau():
    # d/dtau (e^{-tau} + e^{tau/2}) = 0 at tau = (2/3) ln 2, value 3 * 2^{-2/3}
    tau_star = (2.0 / 3.0) * np.log(2.0)
    eps = 1.0
    assert penalty_term(tau_star, eps) == pytest.approx(3.0 * 2.0 ** (-2.0 / 3.0), rel=1e-14)
    taus = np.linspace(-2, 2, 401)
    vals = [penalty_term(t, eps) for t in taus]
    assert min(vals) >= penalty_term(tau_star, eps) - 1e-12


def test_penalized_action_oscillator_value(flat1d_osc):
    calc = LoopCalculus(flat1d_osc, scheme="spectral")
    point = LoopPoint(cos_loop(128, flat1d_osc.chart), np.log(2 * np.pi))
    eps = 1e-3
    a_eps = penalized_action(calc, point, eps)
    expected = np.pi + eps * (1.0 / (2 * np.pi) + np.sqrt(2 * np.pi))
    assert a_eps == pytest.approx(expected, rel=1e-10)
    # the penalty offset is an exact identity regardless of discretization
    assert a_eps - calc.action(point) == pytest.approx(
        eps * (np.exp(-point.tau) + np.exp(point.tau / 2)), rel=1e-15)


def test_penalty_strictly_positive(flat1d_osc):
    calc = LoopCalculus(flat1d_osc)
    rng = np.random.default_rng(0)
    for _ in range(20):
        pt = LoopPoint(cos_loop(64, flat1d_osc.chart, amplitude=rng.uniform(0.1, 2)),
                       rng.uniform(-2, 2))
        assert penalized_action(calc, pt, 1e-4) > calc.action(pt)


def test_penalized_variation_matches_central_differences(flat2d_osc):
    calc = LoopCalculus(flat2d_osc)
    rng = np.random.default_rng(5)
    n = 48
    eps = 3e-3
    from orbitpass.loops import DiscreteLoop
    for _ in range(20):
        loop = DiscreteLoop.from_samples(
            random_band_limited(rng, n, 2, base=rng.uniform(-1, 1, 2)), flat2d_osc.chart)
        tau = rng.uniform(-1, 1)
        point = LoopPoint(loop, tau)
        xi = random_band_limited(rng, n, 2)
        sigma = rng.normal()
        fv = penalized_variation(calc, point, TangentField(xi, sigma), eps)
        h = 1e-5
        ap = penalized_action(calc, LoopPoint(loop.replace_samples(loop.samples + h * xi),
                                              tau + h * sigma), eps)
        am = penalized_action(calc, LoopPoint(loop.replace_samples(loop.samples - h * xi),
                                              tau - h * sigma), eps)
        assert fv == pytest.approx((ap - am) / (2 * h), rel=1e-5, abs=1e-8)


# ---------------------------------------------------------------------------
# stationarity identities


def test_residuals_zero_at_unpenalized_orbit(flat1d_osc):
    calc = LoopCalculus(flat1d_osc)
    point = oscillator_point(flat1d_osc)
    res = ps_identity_residuals(calc, point, 0.0, a_eps=calc.action(point))
    assert abs(res.r1) < 1e-12
    assert abs(res.r2) < 1e-12
    # printed raw form embeds a_eps: at the orbit it sits at -a/2, its partner at 0
    assert res.raw1 == pytest.approx(-0.5 * calc.action(point), rel=1e-9)
    assert abs(res.raw2) < 1e-12


def test_residuals_nonzero_at_constant_loop(flat1d_osc):
    calc = LoopCalculus(flat1d_osc)
    q = np.array([0.3])
    tau = 0.1
    eps = 1e-2
    point = LoopPoint(constant_loop(q, 32, flat1d_osc.chart), tau)
    res = ps_identity_residuals(calc, point, eps)
    v = float(flat1d_osc.potential.value(q))
    expected = np.exp(tau) * v + eps * (np.exp(-tau) - 0.5 * np.exp(tau / 2))
    assert res.r1 == pytest.approx(expected, rel=1e-12)
    assert res.r1 != pytest.approx(0.0, abs=1e-6)


# ---------------------------------------------------------------------------
# Hamiltonian level


def test_hamiltonian_level_values():
    assert hamiltonian_level(0.0, 1.3) == 0.0
    assert hamiltonian_level(1e-3, 0.0) == pytest.approx(-5e-4)


def test_level_residual_unpenalized_orbit(flat1d_osc):
    calc = LoopCalculus(flat1d_osc)
    point = oscillator_point(flat1d_osc, n=256)
    assert level_residual(calc, point, 0.0) < 1e-10


# ---------------------------------------------------------------------------
# tau bounds


def test_tau_bounds_oscillator(flat1d_osc):
    point = oscillator_point(flat1d_osc)
    flags = tau_bound_check(point, eps=1e-3, a2=4.0, a_kappa=0.05)
    assert flags.est2_ok
    assert flags.t2_bound == pytest.approx(np.log(4.0 / 0.05))
    assert flags.t2_ok


def test_tau_bounds_violation():
    from orbitpass.geometry import ChartDomain, GeometryBundle, flat_metric, harmonic_potential
    chart = ChartDomain(1)
    bundle = GeometryBundle(chart, flat_metric(1), harmonic_potential(1))
    point = LoopPoint(constant_loop([0.0], 32, chart), -10.0)
    flags = tau_bound_check(point, eps=1.0, a2=1.0)
    # eps (2 e^{-tau} + ..) = 2 e^{10} >> a2 + 1
    assert not flags.est2_ok
    assert flags.t2_ok is None


# ---------------------------------------------------------------------------
# schedule


def test_schedule_validation():
    with pytest.raises(OrbitPassError):
        PenaltySchedule([1e-2, 1e-2], [1e-8])
    with pytest.raises(OrbitPassError):
        PenaltySchedule([1e-2, -1e-3], [1e-8])
    with pytest.raises(OrbitPassError):
        PenaltySchedule([], [1e-8])
    with pytest.raises(OrbitPassError):
        PenaltySchedule([1e-2, 1e-3], [1e-8, 1e-8, 1e-8])
    with pytest.raises(OrbitPassError):
        PenaltySchedule([1e-2], [1e-8], a1=-1.0)
    sched = PenaltySchedule.default()
    assert list(sched.epsilons) == [1e-2, 3e-3, 1e-3, 3e-4, 1e-4, 1e-5]
    assert len(sched.tolerances) == 6
