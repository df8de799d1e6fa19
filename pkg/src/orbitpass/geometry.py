"""Chart-based Riemannian geometry and potential calculus.

Everything lives in a single global chart with optional periodic coordinates
(covers the flat plane, cylinders S^1 x R, and warped products).  Metric and
potential evaluators are vectorized: a point argument of shape ``(..., n)``
yields values of shape ``(...,)`` / ``(..., n)`` / ``(..., n, n)`` and so on.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np

from .errors import GeometryError
from .expressions import ScalarExpression


# ---------------------------------------------------------------------------
# chart


class ChartDomain:
    """A single global chart: n coordinates, each unbounded or periodic.

    ``periods[i]`` is ``None`` for an unbounded coordinate, otherwise the
    (positive) period.  ``box`` bounds are only used to drive samplers; for
    unbounded coordinates the chart itself is all of R.
    """

    def __init__(self, dimension: int, periods: Optional[Sequence[Optional[float]]] = None,
                 box: Optional[Sequence[Sequence[float]]] = None):
        if dimension < 1:
            raise GeometryError(f"chart dimension must be >= 1, got {dimension}")
        self.dimension = int(dimension)
        if periods is None:
            periods = [None] * dimension
        if len(periods) != dimension:
            raise GeometryError("one period entry per coordinate required")
        per = np.full(dimension, np.inf)
        for i, p in enumerate(periods):
            if p is not None:
                if p <= 0:
                    raise GeometryError(f"period of coordinate {i + 1} must be > 0")
                per[i] = float(p)
        self.periods = per
        self.periodic_mask = np.isfinite(per)
        if box is None:
            box = []
            for i in range(dimension):
                if self.periodic_mask[i]:
                    box.append([0.0, per[i]])
                else:
                    box.append([-5.0, 5.0])
        box_arr = np.asarray(box, dtype=float)
        if box_arr.shape != (dimension, 2) or np.any(box_arr[:, 1] <= box_arr[:, 0]):
            raise GeometryError("sampling box must be a nonempty [lo, hi] per coordinate")
        self.box = box_arr

    @property
    def n_unbounded(self) -> int:
        return int(np.sum(~self.periodic_mask))

    def wrap(self, q: np.ndarray) -> np.ndarray:
        """Wrap periodic coordinates into [0, period)."""
        q = np.array(q, dtype=float, copy=True)
        for i in range(self.dimension):
            if self.periodic_mask[i]:
                q[..., i] = np.mod(q[..., i], self.periods[i])
        return q

    def wrap_difference(self, d: np.ndarray) -> np.ndarray:
        """Shortest representative of a coordinate difference, per coordinate."""
        d = np.array(d, dtype=float, copy=True)
        for i in range(self.dimension):
            if self.periodic_mask[i]:
                p = self.periods[i]
                d[..., i] = np.mod(d[..., i] + 0.5 * p, p) - 0.5 * p
        return d

    def contains(self, q: np.ndarray) -> bool:
        return bool(np.all(np.isfinite(q)))

    def sample_box(self, rng: np.random.Generator, m: int) -> np.ndarray:
        lo, hi = self.box[:, 0], self.box[:, 1]
        return lo + (hi - lo) * rng.random((m, self.dimension))


# ---------------------------------------------------------------------------
# metric


class MetricField:
    """Riemannian metric g_ij on the chart.

    ``evaluator(q)`` must return the symmetric positive definite matrix field,
    shape ``(..., n, n)`` for input ``(..., n)``.  Coordinate derivatives of g
    default to central finite differences with step ``h_g``.
    """

    def __init__(self, dimension: int, evaluator: Callable[[np.ndarray], np.ndarray],
                 preset: str = "custom", h_g: float = 1e-4, is_flat: bool = False):
        self.dimension = dimension
        self._evaluator = evaluator
        self.preset = preset
        self.h_g = float(h_g)
        self.is_flat = is_flat

    def matrix(self, q: np.ndarray) -> np.ndarray:
        q = np.asarray(q, dtype=float)
        g = np.asarray(self._evaluator(q), dtype=float)
        if g.shape != q.shape + (self.dimension,):
            raise GeometryError(
                f"metric evaluator returned shape {g.shape}, expected "
                f"{q.shape + (self.dimension,)}"
            )
        return g

    def inverse(self, q: np.ndarray) -> np.ndarray:
        return np.linalg.inv(self.matrix(q))

    def partials(self, q: np.ndarray) -> np.ndarray:
        """dG[..., a, b, c] = d g_bc / d q^a by central differences."""
        q = np.asarray(q, dtype=float)
        n = self.dimension
        if self.is_flat:
            return np.zeros(q.shape + (n, n))
        h = self.h_g
        out = np.empty(q.shape[:-1] + (n, n, n))
        for a in range(n):
            qp = q.copy()
            qm = q.copy()
            qp[..., a] += h
            qm[..., a] -= h
            out[..., a, :, :] = (self.matrix(qp) - self.matrix(qm)) / (2.0 * h)
        return out

    def christoffel(self, q: np.ndarray) -> np.ndarray:
        """Gamma[..., k, i, j] = Gamma^k_ij, symmetric in (i, j)."""
        if self.is_flat:
            q = np.asarray(q, dtype=float)
            n = self.dimension
            return np.zeros(q.shape[:-1] + (n, n, n))
        dG = self.partials(q)
        ginv = self.inverse(q)
        # Gamma^k_ij = 1/2 g^{kl} (d_i g_lj + d_j g_il - d_l g_ij)
        term = (np.einsum("...ilj->...lij", dG) + np.einsum("...jil->...lij", dG)
                - dG)
        gamma = 0.5 * np.einsum("...kl,...lij->...kij", ginv, term)
        return 0.5 * (gamma + np.swapaxes(gamma, -1, -2))


def flat_metric(dimension: int) -> MetricField:
    eye = np.eye(dimension)

    def ev(q):
        q = np.asarray(q, dtype=float)
        return np.broadcast_to(eye, q.shape + (dimension,)).copy()

    return MetricField(dimension, ev, preset="flat", is_flat=True)


def conformal_metric(dimension: int, factor, h_g: float = 1e-4) -> MetricField:
    """g = e^{2f} delta with conformal exponent f (expression string or callable)."""
    if isinstance(factor, str):
        factor = ScalarExpression(factor, dimension)
    eye = np.eye(dimension)

    def ev(q):
        q = np.asarray(q, dtype=float)
        f = np.asarray(factor(q), dtype=float)
        return np.exp(2.0 * f)[..., None, None] * eye

    return MetricField(dimension, ev, preset="conformal", h_g=h_g)


def warped_metric(dimension: int, warp, warp_axis: int = 0, h_g: float = 1e-4) -> MetricField:
    """Warped product: coordinate ``warp_axis`` carries the factor w(q), the rest are flat.

    On the cylinder chart (q1 angle, q2 radius) with ``warp_axis=0`` this is
    g = w(q) dq1^2 + dq2^2.
    """
    if isinstance(warp, str):
        warp = ScalarExpression(warp, dimension)

    def ev(q):
        q = np.asarray(q, dtype=float)
        w = np.asarray(warp(q), dtype=float)
        g = np.zeros(q.shape + (dimension,))
        for i in range(dimension):
            g[..., i, i] = 1.0
        g[..., warp_axis, warp_axis] = w
        return g

    return MetricField(dimension, ev, preset="warped", h_g=h_g)


# ---------------------------------------------------------------------------
# potential


class PotentialField:
    """Potential V with optional analytic gradient/Hessian evaluators.

    ``grad_coords`` returns the coordinate partials dV_i (a covector), and
    ``hess_coords`` the plain second partials; the curved-space Hessian and
    gradient live on :class:`GeometryBundle` where the metric is known.
    """

    def __init__(self, dimension: int, value: Callable[[np.ndarray], np.ndarray],
                 grad: Optional[Callable] = None, hess: Optional[Callable] = None,
                 preset: str = "custom", params: Optional[dict] = None,
                 h_v: float = 1e-4):
        self.dimension = dimension
        self._value = value
        self._grad = grad
        self._hess = hess
        self.preset = preset
        self.params = dict(params or {})
        self.h_v = float(h_v)

    @property
    def has_analytic_grad(self) -> bool:
        return self._grad is not None

    @property
    def has_analytic_hess(self) -> bool:
        return self._hess is not None

    def value(self, q: np.ndarray) -> np.ndarray:
        q = np.asarray(q, dtype=float)
        v = np.asarray(self._value(q), dtype=float)
        if not np.all(np.isfinite(v)):
            raise GeometryError("potential evaluated to a non-finite value")
        return v

    def grad_coords(self, q: np.ndarray) -> np.ndarray:
        q = np.asarray(q, dtype=float)
        if self._grad is not None:
            return np.asarray(self._grad(q), dtype=float)
        return self.fd_grad_coords(q)

    def fd_grad_coords(self, q: np.ndarray, h: Optional[float] = None) -> np.ndarray:
        q = np.asarray(q, dtype=float)
        h = self.h_v if h is None else h
        n = self.dimension
        out = np.empty(q.shape)
        for a in range(n):
            qp = q.copy()
            qm = q.copy()
            qp[..., a] += h
            qm[..., a] -= h
            out[..., a] = (self.value(qp) - self.value(qm)) / (2.0 * h)
        return out

    def hess_coords(self, q: np.ndarray) -> np.ndarray:
        q = np.asarray(q, dtype=float)
        if self._hess is not None:
            return np.asarray(self._hess(q), dtype=float)
        return self.fd_hess_coords(q)

    def fd_hess_coords(self, q: np.ndarray, h: Optional[float] = None) -> np.ndarray:
        q = np.asarray(q, dtype=float)
        h = self.h_v if h is None else h
        n = self.dimension
        out = np.empty(q.shape + (n,))
        for a in range(n):
            qp = q.copy()
            qm = q.copy()
            qp[..., a] += h
            qm[..., a] -= h
            out[..., a, :] = (self.grad_like_fd(qp, h) - self.grad_like_fd(qm, h)) / (2.0 * h)
        return 0.5 * (out + np.swapaxes(out, -1, -2))

    def grad_like_fd(self, q: np.ndarray, h: float) -> np.ndarray:
        # analytic gradient when available keeps the FD Hessian at O(h^2)
        if self._grad is not None:
            return np.asarray(self._grad(q), dtype=float)
        return self.fd_grad_coords(q, h)


def harmonic_potential(dimension: int, k: float = 1.0, v0: float = 0.5,
                       center: Optional[Sequence[float]] = None) -> PotentialField:
    """V = k/2 |q - c|^2 - v0."""
    c = np.zeros(dimension) if center is None else np.asarray(center, dtype=float)

    def val(q):
        d = np.asarray(q, dtype=float) - c
        return 0.5 * k * np.sum(d * d, axis=-1) - v0

    def grad(q):
        return k * (np.asarray(q, dtype=float) - c)

    def hess(q):
        q = np.asarray(q, dtype=float)
        return np.broadcast_to(k * np.eye(dimension), q.shape + (dimension,)).copy()

    return PotentialField(dimension, val, grad, hess, preset="harmonic",
                          params={"k": k, "v0": v0, "center": list(map(float, c))})


def linear_potential(dimension: int, slope: Sequence[float], offset: float = 0.0) -> PotentialField:
    a = np.asarray(slope, dtype=float)

    def val(q):
        return np.sum(np.asarray(q, dtype=float) * a, axis=-1) + offset

    def grad(q):
        q = np.asarray(q, dtype=float)
        return np.broadcast_to(a, q.shape).copy()

    def hess(q):
        q = np.asarray(q, dtype=float)
        return np.zeros(q.shape + (dimension,))

    return PotentialField(dimension, val, grad, hess, preset="linear",
                          params={"slope": list(map(float, a)), "offset": offset})


def double_well_potential(dimension: int, a: float = 1.0, width: float = 1.0,
                          v0: float = 0.0) -> PotentialField:
    """Radial double well V = a (|q|^2 - width^2)^2 - v0."""

    def val(q):
        r2 = np.sum(np.square(np.asarray(q, dtype=float)), axis=-1)
        return a * np.square(r2 - width ** 2) - v0

    def grad(q):
        q = np.asarray(q, dtype=float)
        r2 = np.sum(q * q, axis=-1)
        return (4.0 * a * (r2 - width ** 2))[..., None] * q

    def hess(q):
        q = np.asarray(q, dtype=float)
        r2 = np.sum(q * q, axis=-1)
        eye = np.eye(dimension)
        return (4.0 * a * (r2 - width ** 2))[..., None, None] * eye \
            + 8.0 * a * q[..., :, None] * q[..., None, :]

    return PotentialField(dimension, val, grad, hess, preset="double_well",
                          params={"a": a, "width": width, "v0": v0})


def _smoothstep_c2(t: np.ndarray) -> np.ndarray:
    """Quintic C^2 ramp: 0 for t<=0, 1 for t>=1."""
    t = np.clip(t, 0.0, 1.0)
    return t ** 3 * (10.0 - 15.0 * t + 6.0 * t * t)


def cutoff_saddle_potential(dimension: int, n_plus: int = 1, c: float = 1.0,
                            r_inner: float = 1.0, r_outer: float = 2.0,
                            h_v: float = 1e-4) -> PotentialField:
    """Indefinite quadratic with a radial cutoff.

    V = rho(|q|)/2 (q_1^2 + .. + q_{n_plus}^2 - rest^2) - c, with rho a C^2
    polynomial ramp from 0 inside ``r_inner`` to 1 outside ``r_outer``.
    Derivatives go through finite differences (the ramp is piecewise
    polynomial).
    """
    signs = np.ones(dimension)
    signs[n_plus:] = -1.0

    def val(q):
        q = np.asarray(q, dtype=float)
        r = np.sqrt(np.sum(q * q, axis=-1))
        rho = _smoothstep_c2((r - r_inner) / (r_outer - r_inner))
        quad = 0.5 * np.sum(signs * q * q, axis=-1)
        return rho * quad - c

    return PotentialField(dimension, val, preset="cutoff_saddle",
                          params={"n_plus": n_plus, "c": c,
                                  "r_inner": r_inner, "r_outer": r_outer},
                          h_v=h_v)


def expression_potential(dimension: int, expr: str, h_v: float = 1e-4) -> PotentialField:
    fn = ScalarExpression(expr, dimension)
    return PotentialField(dimension, fn, preset="expression",
                          params={"expr": expr}, h_v=h_v)


# ---------------------------------------------------------------------------
# bundle


class GeometryBundle:
    """Chart + metric + potential, with the derived calculus used everywhere else."""

    def __init__(self, chart: ChartDomain, metric: MetricField, potential: PotentialField):
        if metric.dimension != chart.dimension or potential.dimension != chart.dimension:
            raise GeometryError("chart, metric and potential dimensions disagree")
        self.chart = chart
        self.metric = metric
        self.potential = potential
        self.dimension = chart.dimension

    # -- metric wrappers -----------------------------------------------------

    def metric_at(self, q: np.ndarray) -> np.ndarray:
        """Validated metric evaluation: symmetric within 1e-12 and SPD."""
        g = self.metric.matrix(q)
        if np.max(np.abs(g - np.swapaxes(g, -1, -2))) > 1e-12:
            raise GeometryError("metric evaluator returned a non-symmetric matrix")
        try:
            np.linalg.cholesky(g)
        except np.linalg.LinAlgError:
            raise GeometryError("metric is not positive definite at a sampled point") from None
        return g

    def christoffel_at(self, q: np.ndarray) -> np.ndarray:
        try:
            np.linalg.inv(self.metric.matrix(q))
        except np.linalg.LinAlgError:
            raise GeometryError("singular metric") from None
        return self.metric.christoffel(q)

    # -- potential calculus ---------------------------------------------------

    def grad_potential(self, q: np.ndarray) -> np.ndarray:
        """grad V = sharp(dV), shape (..., n)."""
        dV = self.potential.grad_coords(q)
        if self.metric.is_flat:
            return dV
        return np.einsum("...ij,...j->...i", self.metric.inverse(q), dV)

    def grad_norm2(self, q: np.ndarray) -> np.ndarray:
        """|grad V|^2 = dV . g^{-1} . dV."""
        dV = self.potential.grad_coords(q)
        if self.metric.is_flat:
            return np.sum(dV * dV, axis=-1)
        ginv = self.metric.inverse(q)
        return np.einsum("...i,...ij,...j->...", dV, ginv, dV)

    def hess_potential(self, q: np.ndarray) -> np.ndarray:
        """Hessian 2-tensor (nabla dV)_ij = d_i d_j V - Gamma^k_ij d_k V."""
        H = self.potential.hess_coords(q)
        if self.metric.is_flat:
            return H
        gamma = self.metric.christoffel(q)
        dV = self.potential.grad_coords(q)
        return H - np.einsum("...kij,...k->...ij", gamma, dV)

    def hess_norm(self, q: np.ndarray) -> np.ndarray:
        """Operator norm sup_{|x|=|y|=1} |Hess V(x,y)| in a g-orthonormal frame."""
        H = self.hess_potential(q)
        if self.metric.is_flat:
            w = np.linalg.eigvalsh(H)
            return np.max(np.abs(w), axis=-1)
        g = self.metric.matrix(q)
        L = np.linalg.cholesky(g)
        A = np.linalg.solve(L, H)
        B = np.linalg.solve(L, np.swapaxes(A, -1, -2))
        w = np.linalg.eigvalsh(0.5 * (B + np.swapaxes(B, -1, -2)))
        return np.max(np.abs(w), axis=-1)

    # -- N_nu shrinking function ----------------------------------------------

    def nu_shrink_value(self, q: np.ndarray) -> np.ndarray:
        """f(q) = V / sqrt(1 + |grad V|^2); equals V at critical points of V."""
        return self.potential.value(q) / np.sqrt(1.0 + self.grad_norm2(q))

    def nu_member(self, q: np.ndarray, nu: float) -> np.ndarray:
        """Membership in the shrunk sublevel set: V <= -nu sqrt(1 + |grad V|^2)."""
        return self.nu_shrink_value(q) <= -nu

    # -- Hamiltonian ----------------------------------------------------------

    def hamiltonian(self, q: np.ndarray, theta: np.ndarray) -> np.ndarray:
        """H(q, theta) = 1/2 g^{ij} theta_i theta_j + V(q)."""
        theta = np.asarray(theta, dtype=float)
        if self.metric.is_flat:
            kin = 0.5 * np.sum(theta * theta, axis=-1)
        else:
            ginv = self.metric.inverse(q)
            kin = 0.5 * np.einsum("...i,...ij,...j->...", theta, ginv, theta)
        return kin + self.potential.value(q)

    def hamiltonian_vector_field(self, q: np.ndarray, theta: np.ndarray):
        """Local-coordinate Hamiltonian field: dq^i = g^{ij} theta_j,
        dtheta_i = -d_i V + Gamma^k_il g^{lj} theta_k theta_j."""
        q = np.asarray(q, dtype=float)
        theta = np.asarray(theta, dtype=float)
        dV = self.potential.grad_coords(q)
        if self.metric.is_flat:
            return theta.copy(), -dV
        ginv = self.metric.inverse(q)
        dq = np.einsum("...ij,...j->...i", ginv, theta)
        gamma = self.metric.christoffel(q)
        dtheta = -dV + np.einsum("...kil,...lj,...k,...j->...i", gamma, ginv, theta, theta)
        return dq, dtheta

    def flow_rk4(self, q: np.ndarray, theta: np.ndarray, dt: float, steps: int = 1):
        """Classical RK4 on the Hamiltonian field, batched over leading axes."""
        q = np.array(q, dtype=float, copy=True)
        theta = np.array(theta, dtype=float, copy=True)
        for _ in range(steps):
            k1q, k1t = self.hamiltonian_vector_field(q, theta)
            k2q, k2t = self.hamiltonian_vector_field(q + 0.5 * dt * k1q, theta + 0.5 * dt * k1t)
            k3q, k3t = self.hamiltonian_vector_field(q + 0.5 * dt * k2q, theta + 0.5 * dt * k2t)
            k4q, k4t = self.hamiltonian_vector_field(q + dt * k3q, theta + dt * k3t)
            q += (dt / 6.0) * (k1q + 2.0 * k2q + 2.0 * k3q + k4q)
            theta += (dt / 6.0) * (k1t + 2.0 * k2t + 2.0 * k3t + k4t)
        return q, theta


# ---------------------------------------------------------------------------
# asymptotic-regularity scan


@dataclass
class ShellStats:
    r_lo: float
    r_hi: float
    inf_grad: float
    max_ratio: float
    samples: int


@dataclass
class RegularityReport:
    """Sampled check of |grad V| >= V_inf and ||Hess V||/|grad V| -> 0 outside K."""

    r_k: float
    shells: list = field(default_factory=list)
    v_inf: float = 0.0
    ratio_monotone: bool = False
    ratio_final: float = math.inf
    ratio_threshold: float = 1.0
    verdict: str = "FAIL"
    total_samples: int = 0

    @property
    def passed(self) -> bool:
        return self.verdict == "PASS"


def regularity_scan(bundle: GeometryBundle, r_k: float, shells: int = 6,
                    samples_per_shell: int = 200, *, center: Optional[np.ndarray] = None,
                    r_max: Optional[float] = None, seed: int = 0,
                    ratio_threshold: float = 1.0, monotone_slack: float = 1.10,
                    v_inf_floor: float = 1e-8) -> RegularityReport:
    """Sample radial shells beyond ``r_k`` and classify the potential's growth.

    Shells are annuli in the unbounded coordinates (periodic coordinates are
    sampled uniformly over their period).  PASS requires the per-shell infimum
    of |grad V| to stay above the outer-shell estimate of V_inf, and the
    per-shell maximum of ||Hess V||/|grad V| to decrease below
    ``ratio_threshold``.
    """
    if shells < 2:
        raise GeometryError("regularity scan needs at least 2 shells")
    chart = bundle.chart
    free = np.where(~chart.periodic_mask)[0]
    if free.size == 0:
        raise GeometryError("no unbounded coordinates to scan (all samples would "
                            "leave the chart's radial range)")
    n = chart.dimension
    if center is None:
        center = np.zeros(n)
    center = np.asarray(center, dtype=float)
    if r_max is None:
        widths = chart.box[free, 1] - chart.box[free, 0]
        r_max = max(float(np.max(widths)), 2.0 * r_k + 1.0)
    if r_max <= r_k:
        raise GeometryError("r_max must exceed r_k")

    rng = np.random.default_rng(seed)
    edges = np.linspace(r_k, r_max, shells + 1)
    report = RegularityReport(r_k=r_k, ratio_threshold=ratio_threshold)

    for j in range(shells):
        r_lo, r_hi = edges[j], edges[j + 1]
        u = rng.normal(size=(samples_per_shell, free.size))
        u /= np.linalg.norm(u, axis=1, keepdims=True)
        r = r_lo + (r_hi - r_lo) * rng.random(samples_per_shell)
        pts = np.tile(center, (samples_per_shell, 1))
        pts[:, free] = center[free] + r[:, None] * u
        for i in range(n):
            if chart.periodic_mask[i]:
                pts[:, i] = chart.periods[i] * rng.random(samples_per_shell)
        grad = np.sqrt(bundle.grad_norm2(pts))
        hess = bundle.hess_norm(pts)
        ratio = hess / np.maximum(grad, 1e-300)
        report.shells.append(ShellStats(float(r_lo), float(r_hi),
                                        float(np.min(grad)), float(np.max(ratio)),
                                        samples_per_shell))
        report.total_samples += samples_per_shell

    infs = np.array([s.inf_grad for s in report.shells])
    ratios = np.array([s.max_ratio for s in report.shells])
    # uniform lower bound over everything sampled beyond r_k; every shell
    # satisfies inf |grad V| >= v_inf by construction
    report.v_inf = float(np.min(infs))
    report.ratio_final = float(ratios[-1])
    report.ratio_monotone = bool(
        np.all(ratios[1:] <= monotone_slack * ratios[:-1] + 1e-12))
    ok = (report.v_inf >= v_inf_floor
          and report.ratio_monotone
          and report.ratio_final <= ratio_threshold)
    report.verdict = "PASS" if ok else "FAIL"
    return report
