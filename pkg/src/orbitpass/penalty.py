"""Penalized functionals A_eps and the identities their critical points satisfy.

A_eps(c, tau) = A(c, tau) + eps (e^{-tau} + e^{tau/2}); the two exponentials
penalize short and long periods and restore compactness.  Everything the
analysis proves about critical points of A_eps becomes a computable residual
here: the tau-stationarity identity, the Hamiltonian level eps-tilde, and the
a-priori tau bounds.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from .errors import OrbitPassError
from .loops import LoopCalculus, LoopPoint, TangentField, penalty_tau_derivative


def penalty_term(tau: float, eps: float) -> float:
    return eps * (np.exp(-tau) + np.exp(0.5 * tau))


def penalized_action(calc: LoopCalculus, point: LoopPoint, eps: float) -> float:
    """A_eps = A + eps (e^{-tau} + e^{tau/2}); reduces to A at eps = 0."""
    if eps < 0:
        raise OrbitPassError("penalty strength eps must be >= 0")
    return calc.action(point) + penalty_term(point.tau, eps)


def penalized_variation(calc: LoopCalculus, point: LoopPoint, fld: TangentField,
                        eps: float) -> float:
    """dA_eps(xi, sigma) = dA(xi, sigma) - eps (e^{-tau} - e^{tau/2}/2) sigma."""
    return calc.first_variation(point, fld) + penalty_tau_derivative(point.tau, eps) * fld.sigma


@dataclass
class PsResiduals:
    """Stationarity residuals at an (approximately) eps-critical point.

    ``r1`` and ``r2`` are the shipped forms that vanish exactly at discrete
    critical points: r1 is minus the tau-partial of A_eps and r2 the offset of
    A_eps from the recorded level a_eps.  ``raw1``/``raw2`` log the sequence
    identities in their printed normalization for information; raw1 embeds the
    limit value a_eps and is not zero at a single critical point (raw2 is).
    """

    r1: float
    r2: float
    raw1: float
    raw2: float


def ps_identity_residuals(calc: LoopCalculus, point: LoopPoint, eps: float,
                          a_eps: Optional[float] = None) -> PsResiduals:
    tau = point.tau
    et, emt, eht = np.exp(tau), np.exp(-tau), np.exp(0.5 * tau)
    energy = calc.energy(point.loop)
    pot = calc.potential_integral(point.loop)
    a_val = emt * energy - et * pot + penalty_term(tau, eps)
    if a_eps is None:
        a_eps = a_val
    r1 = emt * energy + et * pot + eps * (emt - 0.5 * eht)
    r2 = a_val - a_eps
    raw1 = emt * energy + eps * (2.0 * emt + 0.5 * eht) - a_eps
    raw2 = et * pot - 0.75 * eps * eht + 0.5 * a_eps
    return PsResiduals(float(r1), float(r2), float(raw1), float(raw2))


def hamiltonian_level(eps: float, tau: float) -> float:
    """eps-tilde = eps (-e^{-2 tau} + e^{-tau/2}/2), the energy of the eps-orbit."""
    return eps * (-np.exp(-2.0 * tau) + 0.5 * np.exp(-0.5 * tau))


def level_residual(calc: LoopCalculus, point: LoopPoint, eps: float) -> float:
    """max_s |H_eps(s) - eps-tilde| along the loop."""
    H, _, _ = calc.hamiltonian_along_loop(point)
    return float(np.max(np.abs(H - hamiltonian_level(eps, point.tau))))


@dataclass
class TauBoundFlags:
    est2_value: float
    est2_bound: float
    est2_ok: bool
    t2_bound: Optional[float]
    t2_ok: Optional[bool]


def tau_bound_check(point: LoopPoint, eps: float, a2: float,
                    a_kappa: Optional[float] = None) -> TauBoundFlags:
    """A-priori tau bounds: eps (2 e^{-tau} + e^{tau/2}/2) <= a2 + 1, and the
    eps-independent upper bound tau <= max(0, log(a2 / a_kappa)) when the
    contact scan supplies a_kappa."""
    tau = point.tau
    val = eps * (2.0 * np.exp(-tau) + 0.5 * np.exp(0.5 * tau))
    est2_ok = bool(val <= a2 + 1.0)
    t2_bound = None
    t2_ok = None
    if a_kappa is not None and a_kappa > 0:
        t2_bound = max(0.0, float(np.log(a2 / a_kappa)))
        t2_ok = bool(tau <= t2_bound)
    return TauBoundFlags(float(val), a2 + 1.0, est2_ok, t2_bound, t2_ok)


@dataclass
class PenaltySchedule:
    """Decreasing eps values with per-eps gradient tolerances and the action window."""

    epsilons: Sequence[float]
    tolerances: Sequence[float]
    a1: Optional[float] = None
    a2: Optional[float] = None

    DEFAULT_EPSILONS = (1e-2, 3e-3, 1e-3, 3e-4, 1e-4, 1e-5)

    def __post_init__(self):
        eps = [float(e) for e in self.epsilons]
        if not eps:
            raise OrbitPassError("penalty schedule needs at least one eps value")
        if any(e <= 0 for e in eps):
            raise OrbitPassError("penalty schedule eps values must be positive")
        if any(b >= a for a, b in zip(eps, eps[1:])):
            raise OrbitPassError("penalty schedule eps values must be strictly decreasing")
        self.epsilons = eps
        tol = [float(t) for t in self.tolerances]
        if len(tol) == 1:
            tol = tol * len(eps)
        if len(tol) != len(eps):
            raise OrbitPassError("one tolerance per eps value (or a single shared one)")
        self.tolerances = tol
        if self.a1 is not None and self.a1 <= 0:
            raise OrbitPassError("action window must have a1 > 0")

    @classmethod
    def default(cls, tol: float = 1e-9) -> "PenaltySchedule":
        return cls(list(cls.DEFAULT_EPSILONS), [tol])


@dataclass
class PenaltyDiagnostics:
    """Per-eps record kept by the continuation: identities, levels and bounds."""

    eps: float
    a_eps: float
    residuals: PsResiduals = None
    eps_tilde: float = 0.0
    level_residual: float = 0.0
    tau: float = 0.0
    tau_flags: TauBoundFlags = None
    grad_norm: float = 0.0
    flags: dict = field(default_factory=dict)
