"""Uniform-contact-type verification on nearby energy surfaces.

The perturbed one-form is Lambda + kappa df with f(q, theta) = theta(v(q)) and
v = -grad V / (1 + |grad V|^2).  Along the Hamiltonian field this gives
Theta(X_H) = |theta|^2 + kappa X_H(f), which stays uniformly positive on the
surfaces H = eps for |eps| below a small threshold, provided kappa <= 1/(2C).
The scan samples those surfaces, evaluates the analytic derivative formula,
and compares the sampled minimum against the closed-form lower bound a_kappa.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import numpy as np
from scipy.optimize import minimize

from .errors import GeometryError
from .geometry import GeometryBundle, RegularityReport, regularity_scan


def contact_vector_field(bundle: GeometryBundle, q: np.ndarray) -> np.ndarray:
    """v(q) = -grad V / (1 + |grad V|^2); |v| <= 1/2 everywhere."""
    grad = bundle.grad_potential(q)
    n2 = bundle.grad_norm2(q)
    return -grad / (1.0 + n2)[..., None]


def contact_function(bundle: GeometryBundle, q: np.ndarray, theta: np.ndarray) -> np.ndarray:
    """f(q, theta) = theta(v(q)), linear in theta."""
    v = contact_vector_field(bundle, q)
    return np.sum(np.asarray(theta, dtype=float) * v, axis=-1)


def xh_of_f_analytic(bundle: GeometryBundle, q: np.ndarray, theta: np.ndarray) -> np.ndarray:
    """Derivative of f along the Hamiltonian vector field, in closed form.

    X_H(f) = |grad V|^2/(1+|grad V|^2)
             - Hess V(#theta, #theta)/(1+|grad V|^2)
             + 2 theta(grad V) Hess V(grad V, #theta)/(1+|grad V|^2)^2
    """
    q = np.asarray(q, dtype=float)
    theta = np.asarray(theta, dtype=float)
    dV = bundle.potential.grad_coords(q)
    H = bundle.hess_potential(q)
    if bundle.metric.is_flat:
        grad = dV
        sharp = theta
    else:
        ginv = bundle.metric.inverse(q)
        grad = np.einsum("...ij,...j->...i", ginv, dV)
        sharp = np.einsum("...ij,...j->...i", ginv, theta)
    n2 = np.sum(dV * grad, axis=-1)
    denom = 1.0 + n2
    hess_tt = np.einsum("...i,...ij,...j->...", sharp, H, sharp)
    hess_gt = np.einsum("...i,...ij,...j->...", grad, H, sharp)
    th_grad = np.sum(theta * grad, axis=-1)
    return n2 / denom - hess_tt / denom + 2.0 * th_grad * hess_gt / denom ** 2


def xh_of_f_oracle(bundle: GeometryBundle, q: np.ndarray, theta: np.ndarray,
                   delta: float = 1e-4) -> np.ndarray:
    """Flow-derivative cross-check: difference f along one RK4 step of +-delta."""
    qp, tp = bundle.flow_rk4(q, theta, delta)
    qm, tm = bundle.flow_rk4(q, theta, -delta)
    return (contact_function(bundle, qp, tp) - contact_function(bundle, qm, tm)) / (2.0 * delta)


def theta_of_xh(bundle: GeometryBundle, q: np.ndarray, theta: np.ndarray,
                kappa: float) -> np.ndarray:
    """Theta(X_H) = |theta|^2 + kappa X_H(f) for Theta = Lambda + kappa df."""
    theta = np.asarray(theta, dtype=float)
    if bundle.metric.is_flat:
        lam = np.sum(theta * theta, axis=-1)
    else:
        ginv = bundle.metric.inverse(q)
        lam = np.einsum("...i,...ij,...j->...", theta, ginv, theta)
    return lam + kappa * xh_of_f_analytic(bundle, q, theta)


def a_kappa_bound(kappa: float, v_inf: float, v_zero: float, eps0: float) -> float:
    """Uniform lower bound min(kappa V_inf^2/(1+V_inf^2), kappa V_0^2/(1+V_0^2), eps0)."""
    return min(kappa * v_inf ** 2 / (1.0 + v_inf ** 2),
               kappa * v_zero ** 2 / (1.0 + v_zero ** 2),
               eps0)


@dataclass
class ContactCheckReport:
    """Outcome of the uniform-contact scan on the energy band |eps| < eps0."""

    eps0: float
    kappa: float
    kappa0: float
    big_c: float
    v_inf: float
    v_zero: float
    a_kappa: float
    sampled_min: float
    samples: int
    passed: bool
    advisory: bool = False
    kappa_was_auto: bool = False
    levels: list = field(default_factory=list)
    level_minima: list = field(default_factory=list)

    def summary_lines(self):
        lines = [
            f"eps0: {self.eps0:.17g}",
            f"kappa: {self.kappa:.17g}" + ("  (auto = kappa0)" if self.kappa_was_auto else ""),
            f"kappa0: {self.kappa0:.17g}",
            f"C (sampled sup of 3||Hess||/(1+|grad|^2), +10% margin): {self.big_c:.17g}",
            f"V_inf estimate: {self.v_inf:.17g}",
            f"V_0 estimate (gradient floor near {{V=0}}): {self.v_zero:.17g}",
            f"a_kappa: {self.a_kappa:.17g}",
            f"sampled min Theta(X_H): {self.sampled_min:.17g}",
            f"samples: {self.samples}",
            f"result: {'pass' if self.passed else 'FAIL'}"
            + ("  [ADVISORY: regularity scan did not pass]" if self.advisory else ""),
        ]
        return lines


def _estimate_big_c(bundle, rng, box_samples, safety):
    pts = bundle.chart.sample_box(rng, box_samples)
    hess = bundle.hess_norm(pts)
    n2 = bundle.grad_norm2(pts)
    return (1.0 + safety) * float(np.max(3.0 * hess / (1.0 + n2)))


def _estimate_v_zero(bundle, rng, eps0, r_k, center, band_samples, polish_starts=5):
    """Gradient floor on the band |V| <= 2 eps0 within radius r_k of the center.

    The sampled minimum of |grad V| is polished with a bounded minimization of
    |grad V|^2 so that degenerate points on the zero set are found reliably.
    """
    n = bundle.dimension
    pts = center + r_k * (2.0 * rng.random((max(20 * band_samples, 2000), n)) - 1.0)
    vals = bundle.potential.value(pts)
    band = pts[np.abs(vals) <= 2.0 * eps0]
    if band.shape[0] == 0:
        raise GeometryError("no points with |V| <= 2 eps0 found near the center; "
                            "is the zero set inside radius r_k?")
    g2 = bundle.grad_norm2(band)
    order = np.argsort(g2)
    best = float(np.sqrt(g2[order[0]]))
    bounds = [(c - r_k, c + r_k) for c in np.atleast_1d(center)]

    def objective(x):
        return float(bundle.grad_norm2(x))

    for idx in order[:polish_starts]:
        res = minimize(objective, band[idx], method="L-BFGS-B", bounds=bounds,
                       options={"maxiter": 60})
        # keep the polished point only while it stays on the relevant band
        if abs(float(bundle.potential.value(res.x))) <= 4.0 * eps0:
            best = min(best, float(np.sqrt(max(res.fun, 0.0))))
    return best


def sample_energy_surface(bundle: GeometryBundle, eps: float, rng: np.random.Generator,
                          count: int, max_tries: int = 200) -> tuple:
    """Draw (q, theta) on Sigma_eps: V(q) <= eps, |theta|^2 = 2 (eps - V(q)).

    Directions are uniform on the unit g*-sphere.  Raises if the box contains
    no admissible base points.
    """
    n = bundle.dimension
    qs = []
    need = count
    for _ in range(max_tries):
        cand = bundle.chart.sample_box(rng, max(4 * need, 64))
        keep = cand[bundle.potential.value(cand) <= eps]
        if keep.shape[0]:
            qs.append(keep[:need])
            need -= min(need, keep.shape[0])
        if need <= 0:
            break
    if not qs:
        raise GeometryError(f"no sampleable points on Sigma_eps for eps={eps}: "
                            "V > eps everywhere in the box")
    q = np.concatenate(qs, axis=0)
    u = rng.normal(size=q.shape)
    if bundle.metric.is_flat:
        norm = np.linalg.norm(u, axis=-1)
    else:
        ginv = bundle.metric.inverse(q)
        norm = np.sqrt(np.einsum("...i,...ij,...j->...", u, ginv, u))
    scale = np.sqrt(2.0 * (eps - bundle.potential.value(q))) / np.maximum(norm, 1e-300)
    return q, u * scale[..., None]


def uniform_contact_scan(bundle: GeometryBundle, eps0: float, kappa: Optional[float] = None,
                         *, levels: int = 5, samples_per_level: int = 400,
                         r_k: float = 2.0, center: Optional[np.ndarray] = None,
                         seed: int = 0, box_samples: int = 4000, safety: float = 0.10,
                         tol: float = 1e-9, v_zero_floor: float = 1e-6,
                         regularity: Optional[RegularityReport] = None,
                         v_inf: Optional[float] = None) -> ContactCheckReport:
    """Sample the energy band and check Theta(X_H) >= a_kappa uniformly.

    ``kappa=None`` selects kappa0 = 1/(2C) with C the sampled (margin-inflated)
    sup of 3||Hess V||/(1+|grad V|^2).  When the regularity scan did not pass,
    the report is marked advisory.
    """
    if eps0 <= 0:
        raise GeometryError("eps0 must be positive")
    rng = np.random.default_rng(seed)
    if center is None:
        center = np.zeros(bundle.dimension)
    center = np.asarray(center, dtype=float)

    big_c = _estimate_big_c(bundle, rng, box_samples, safety)
    kappa0 = 1.0 / (2.0 * big_c)
    auto = kappa is None
    if auto:
        kappa = kappa0

    advisory = False
    if v_inf is None:
        if regularity is None:
            regularity = regularity_scan(bundle, r_k=r_k, center=center,
                                         seed=int(rng.integers(2 ** 31)))
        v_inf = regularity.v_inf
        advisory = not regularity.passed
    v_zero = _estimate_v_zero(bundle, rng, eps0, r_k, center, samples_per_level)
    a_k = a_kappa_bound(kappa, v_inf, v_zero, eps0)

    eps_levels = np.linspace(-0.999 * eps0, 0.999 * eps0, levels)
    minima = []
    total = 0
    for eps in eps_levels:
        q, th = sample_energy_surface(bundle, float(eps), rng, samples_per_level)
        vals = theta_of_xh(bundle, q, th, kappa)
        minima.append(float(np.min(vals)))
        total += q.shape[0]
    sampled_min = float(np.min(minima))

    passed = (sampled_min >= -1e-12
              and sampled_min >= a_k - tol
              and v_zero >= v_zero_floor)
    return ContactCheckReport(eps0=eps0, kappa=float(kappa), kappa0=float(kappa0),
                              big_c=big_c, v_inf=float(v_inf), v_zero=v_zero,
                              a_kappa=float(a_k), sampled_min=sampled_min,
                              samples=total, passed=passed, advisory=advisory,
                              kappa_was_auto=auto,
                              levels=[float(e) for e in eps_levels],
                              level_minima=minima)
