import numpy as np
import pytest

from orbitpass.geometry import (
    ChartDomain,
    GeometryBundle,
    conformal_metric,
    flat_metric,
    harmonic_potential,
    warped_metric,
)


@pytest.fixture
def flat1d_osc():
    """Flat line with the unit harmonic oscillator V = q^2/2 - 1/2."""
    chart = ChartDomain(1, box=[[-6.0, 6.0]])
    return GeometryBundle(chart, flat_metric(1), harmonic_potential(1, k=1.0, v0=0.5))


@pytest.fixture
def flat2d_osc():
    chart = ChartDomain(2, box=[[-6.0, 6.0], [-6.0, 6.0]])
    return GeometryBundle(chart, flat_metric(2), harmonic_potential(2, k=1.0, v0=0.5))


@pytest.fixture
def conformal2d():
    """Conformally flat plane, g = e^{0.6 q1} delta, with the 2-d oscillator potential."""
    chart = ChartDomain(2, box=[[-3.0, 3.0], [-3.0, 3.0]])
    return GeometryBundle(chart, conformal_metric(2, "0.3*q1"),
                          harmonic_potential(2, k=1.0, v0=0.5))


@pytest.fixture
def warped_cylinder():
    """Cylinder chart (angle, radius) with metric (q2^2+1) dphi^2 + dr^2."""
    chart = ChartDomain(2, periods=[2.0 * np.pi, None],
                        box=[[0.0, 2.0 * np.pi], [-4.0, 4.0]])
    metric = warped_metric(2, "q2^2 + 1", warp_axis=0)
    potential = harmonic_potential(2, k=1.0, v0=0.5)
    return GeometryBundle(chart, metric, potential)
