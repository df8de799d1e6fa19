"""Discrete free loop space: loops, the rescaled action, and its calculus.

A loop is N uniform samples of a closed curve in chart coordinates; the pair
(loop, tau) carries the log-period, T = e^tau.  The rescaled action

    A(c, tau) = e^{-tau} E(c) - e^{tau} W(c),
    E(c) = 1/2 integral |c'|_g^2 ds,   W(c) = integral V(c) ds,

is discretized with the periodic rectangle rule and either central-difference
or spectral derivatives.  The first variation implemented here is the exact
derivative of the discrete functional (descent stays monotone); the continuum
formula is recovered to O(h^2) and is used as a test oracle only.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass
from typing import Optional

import numpy as np

from .errors import GeometryError, OrbitPassError
from .geometry import ChartDomain, GeometryBundle

SCHEMES = ("central", "spectral")


class DiffOp:
    """Periodic differentiation d/ds on an N-point grid.

    Both schemes are antisymmetric (D^T = -D), which the exact discrete
    gradient of the kinetic term relies on.
    """

    def __init__(self, n_samples: int, scheme: str = "central"):
        if scheme not in SCHEMES:
            raise OrbitPassError(f"unknown derivative scheme {scheme!r}")
        self.n = n_samples
        self.scheme = scheme
        if scheme == "spectral":
            k = np.fft.rfftfreq(n_samples, d=1.0 / n_samples)
            mult = 2.0j * np.pi * k
            if n_samples % 2 == 0:
                mult[-1] = 0.0  # zero the Nyquist derivative, keeps D real-antisymmetric
            self._mult = mult

    def apply(self, arr: np.ndarray) -> np.ndarray:
        """Differentiate columns of an (N, ...) periodic array."""
        if self.scheme == "central":
            return 0.5 * self.n * (np.roll(arr, -1, axis=0) - np.roll(arr, 1, axis=0))
        spec = np.fft.rfft(arr, axis=0)
        shape = (len(self._mult),) + (1,) * (arr.ndim - 1)
        return np.fft.irfft(spec * self._mult.reshape(shape), n=self.n, axis=0)


@dataclass
class DiscreteLoop:
    """Closed curve sampled at s_i = i/N; periodic coordinates stored wrapped.

    ``winding`` counts how many periods each periodic coordinate advances per
    circuit; it is fixed at construction (neighbor differences take the
    shortest representative) and preserved by descent, which only searches the
    contractible class in practice.
    """

    samples: np.ndarray
    chart: ChartDomain
    winding: np.ndarray

    @classmethod
    def from_samples(cls, samples: np.ndarray, chart: ChartDomain) -> "DiscreteLoop":
        samples = np.asarray(samples, dtype=float)
        if samples.ndim != 2 or samples.shape[1] != chart.dimension:
            raise OrbitPassError("loop samples must have shape (N, n)")
        if samples.shape[0] < 8:
            raise OrbitPassError("a loop needs at least 8 samples")
        if not np.all(np.isfinite(samples)):
            raise OrbitPassError("loop samples must be finite")
        wrapped = chart.wrap(samples)
        diffs = chart.wrap_difference(np.roll(wrapped, -1, axis=0) - wrapped)
        total = np.sum(diffs, axis=0)
        winding = np.zeros(chart.dimension, dtype=int)
        per = chart.periods
        for i in range(chart.dimension):
            if np.isfinite(per[i]):
                winding[i] = int(np.rint(total[i] / per[i]))
        return cls(wrapped, chart, winding)

    @classmethod
    def from_function(cls, fn, n_samples: int, chart: ChartDomain) -> "DiscreteLoop":
        s = np.arange(n_samples) / n_samples
        return cls.from_samples(np.asarray([fn(si) for si in s], dtype=float), chart)

    @property
    def n_samples(self) -> int:
        return self.samples.shape[0]

    @property
    def grid(self) -> np.ndarray:
        return np.arange(self.n_samples) / self.n_samples

    def unwrapped(self) -> np.ndarray:
        """Continuous representative: cumulative shortest-step lift of the samples."""
        diffs = self.chart.wrap_difference(np.diff(self.samples, axis=0))
        out = np.empty_like(self.samples)
        out[0] = self.samples[0]
        out[1:] = self.samples[0] + np.cumsum(diffs, axis=0)
        return out

    def replace_samples(self, samples: np.ndarray) -> "DiscreteLoop":
        return DiscreteLoop(self.chart.wrap(samples), self.chart, self.winding.copy())


@dataclass
class LoopPoint:
    """A point of loop space x R: the loop and its log-period."""

    loop: DiscreteLoop
    tau: float

    @property
    def period(self) -> float:
        return float(np.exp(self.tau))


@dataclass
class TangentField:
    """Variation direction (xi, sigma) along a loop point."""

    xi: np.ndarray
    sigma: float = 0.0


# ---------------------------------------------------------------------------
# calculus


class LoopCalculus:
    """All loop-space operations for one geometry and derivative scheme."""

    def __init__(self, bundle: GeometryBundle, scheme: str = "central"):
        self.bundle = bundle
        self.scheme = scheme
        self._diff_cache: dict[int, DiffOp] = {}

    def diff(self, n: int) -> DiffOp:
        op = self._diff_cache.get(n)
        if op is None:
            op = DiffOp(n, self.scheme)
            self._diff_cache[n] = op
        return op

    # -- derivatives ---------------------------------------------------------

    def loop_derivative(self, loop: DiscreteLoop) -> np.ndarray:
        """c'(s_i), winding-corrected on periodic coordinates."""
        D = self.diff(loop.n_samples)
        if np.any(loop.winding != 0):
            per = np.where(np.isfinite(loop.chart.periods), loop.chart.periods, 0.0)
            slope = loop.winding * per
            z = loop.unwrapped() - loop.grid[:, None] * slope
            return D.apply(z) + slope
        if loop.chart.periodic_mask.any():
            return D.apply(loop.unwrapped())
        return D.apply(loop.samples)

    def second_derivative(self, loop: DiscreteLoop) -> np.ndarray:
        return self.diff(loop.n_samples).apply(self.loop_derivative(loop))

    def covariant_derivative(self, loop: DiscreteLoop, xi: np.ndarray) -> np.ndarray:
        """nabla_s xi = xi' + Gamma(c)(c', xi); the plain derivative when flat."""
        dxi = self.diff(loop.n_samples).apply(np.asarray(xi, dtype=float))
        if self.bundle.metric.is_flat:
            return dxi
        gamma = self.bundle.metric.christoffel(loop.samples)
        d = self.loop_derivative(loop)
        return dxi + np.einsum("ikab,ia,ib->ik", gamma, d, xi)

    # -- energies and the action ----------------------------------------------

    def energy(self, loop: DiscreteLoop) -> float:
        d = self.loop_derivative(loop)
        if self.bundle.metric.is_flat:
            return 0.5 * float(np.mean(np.sum(d * d, axis=-1)))
        g = self.bundle.metric.matrix(loop.samples)
        return 0.5 * float(np.mean(np.einsum("ia,iab,ib->i", d, g, d)))

    def potential_integral(self, loop: DiscreteLoop) -> float:
        return float(np.mean(self.bundle.potential.value(loop.samples)))

    def action(self, point: LoopPoint) -> float:
        return (np.exp(-point.tau) * self.energy(point.loop)
                - np.exp(point.tau) * self.potential_integral(point.loop))

    # -- exact discrete first variation ---------------------------------------

    def action_gradient(self, point: LoopPoint):
        """Raw partial derivatives of the discrete action.

        Returns ``(r, r_tau)`` with ``r[j, a] = dA/dc_j^a`` and
        ``r_tau = dA/dtau``; exact for the implemented quadrature and
        difference scheme (the metric's coordinate derivative is the one
        finite-difference ingredient).
        """
        loop, tau = point.loop, point.tau
        n = loop.n_samples
        D = self.diff(n)
        d = self.loop_derivative(loop)
        c = loop.samples
        et, emt = np.exp(tau), np.exp(-tau)
        dV = self.bundle.potential.grad_coords(c)
        if self.bundle.metric.is_flat:
            kin = -(1.0 / n) * D.apply(d)
            energy = 0.5 * float(np.mean(np.sum(d * d, axis=-1)))
        else:
            g = self.bundle.metric.matrix(c)
            dG = self.bundle.metric.partials(c)
            gd = np.einsum("iab,ib->ia", g, d)
            kin = (0.5 / n) * np.einsum("iabc,ib,ic->ia", dG, d, d) \
                - (1.0 / n) * D.apply(gd)
            energy = 0.5 * float(np.mean(np.einsum("ia,ia->i", d, gd)))
        pot = float(np.mean(self.bundle.potential.value(c)))
        r = emt * kin - (et / n) * dV
        r_tau = -emt * energy - et * pot
        return r, r_tau

    def first_variation(self, point: LoopPoint, field: TangentField) -> float:
        """dA(c, tau)(xi, sigma), linear in the field."""
        r, r_tau = self.action_gradient(point)
        return float(np.sum(r * field.xi) + r_tau * field.sigma)

    # -- H^1 x R gradient -------------------------------------------------------

    def h1_eigenvalues(self, n: int) -> np.ndarray:
        k = np.arange(n // 2 + 1)
        return 1.0 + 4.0 * n * n * np.sin(np.pi * k / n) ** 2

    def h1_solve(self, density: np.ndarray) -> np.ndarray:
        """Solve (I - D_s^2) g = density on the cyclic grid (3-point Laplacian)."""
        lam = self.h1_eigenvalues(density.shape[0])
        spec = np.fft.rfft(density, axis=0)
        return np.fft.irfft(spec / lam[:, None], n=density.shape[0], axis=0)

    def h1_gradient(self, point: LoopPoint, penalty_eps: float = 0.0) -> TangentField:
        """Riesz representative of dA (or dA_eps) in the flat-chart H^1 x R metric.

        The loop part solves the cyclic second-difference system
        (I - D_s^2) g = rho with rho the L^2 density of the loop derivative;
        the tau part is the plain partial derivative.
        """
        r, r_tau = self.action_gradient(point)
        if penalty_eps:
            r_tau += penalty_tau_derivative(point.tau, penalty_eps)
        n = point.loop.n_samples
        if not (np.all(np.isfinite(r)) and np.isfinite(r_tau)):
            # overflowed action region (extreme tau); signal an unusable direction
            return TangentField(np.zeros_like(r), np.inf)
        g = self.h1_solve(n * r)
        residual = (g - self._laplacian(g)) - n * r
        if np.max(np.abs(residual)) > 1e-10 * (1.0 + np.max(np.abs(n * r))):
            raise OrbitPassError("H^1 preconditioner solve lost accuracy")
        return TangentField(g, float(r_tau))

    @staticmethod
    def _laplacian(g: np.ndarray) -> np.ndarray:
        n = g.shape[0]
        return n * n * (np.roll(g, -1, axis=0) - 2.0 * g + np.roll(g, 1, axis=0))

    def h1_norm(self, field: TangentField) -> float:
        """Discrete H^1 x R norm (flat chart, forward differences); inf on overflow."""
        xi = field.xi
        n = xi.shape[0]
        with np.errstate(over="ignore", invalid="ignore"):
            dxi = n * (np.roll(xi, -1, axis=0) - xi)
            val = np.sqrt(np.mean(np.sum(xi * xi + dxi * dxi, axis=-1))
                          + np.float64(field.sigma) ** 2)
        return float(val) if np.isfinite(val) else np.inf

    def h1_pairing(self, a: TangentField, b: TangentField) -> float:
        xi, eta = a.xi, b.xi
        n = xi.shape[0]
        dxi = n * (np.roll(xi, -1, axis=0) - xi)
        deta = n * (np.roll(eta, -1, axis=0) - eta)
        return float(np.mean(np.sum(xi * eta + dxi * deta, axis=-1)) + a.sigma * b.sigma)

    # -- norms and distances -----------------------------------------------------

    def norms(self, loop: DiscreteLoop, xi: np.ndarray, spectral: Optional[bool] = None) -> dict:
        """L^2, C^0, H^1 and perp norms of a field along the loop (metric-weighted).

        The perp norm |nabla_s xi|_{L^2} vanishes on covariant-constant fields,
        so it is degenerate on fields with a nonzero mean; the H^1 <= sqrt(2) perp
        equivalence holds on mean-zero fields.
        """
        xi = np.asarray(xi, dtype=float)
        calc = self if spectral is None else LoopCalculus(
            self.bundle, "spectral" if spectral else "central")
        dxi = calc.covariant_derivative(loop, xi)
        if self.bundle.metric.is_flat:
            sq = np.sum(xi * xi, axis=-1)
            dsq = np.sum(dxi * dxi, axis=-1)
        else:
            g = self.bundle.metric.matrix(loop.samples)
            sq = np.einsum("ia,iab,ib->i", xi, g, xi)
            dsq = np.einsum("ia,iab,ib->i", dxi, g, dxi)
        l2 = float(np.sqrt(np.mean(sq)))
        c0 = float(np.sqrt(np.max(sq)))
        perp = float(np.sqrt(np.mean(dsq)))
        h1 = float(np.sqrt(np.mean(sq) + np.mean(dsq)))
        return {"L2": l2, "C0": c0, "H1": h1, "perp": perp}

    def loop_distance_c0(self, a: DiscreteLoop, b: DiscreteLoop) -> float:
        """sup_s chart distance of matching samples (shortest representative)."""
        d = a.chart.wrap_difference(a.samples - b.samples)
        return float(np.max(np.linalg.norm(d, axis=-1)))

    # -- orbit diagnostics ---------------------------------------------------------

    def hamiltonian_along_loop(self, point: LoopPoint):
        """H(s_i) = 1/2 e^{-2 tau} |c'|_g^2 + V(c); constant at critical points."""
        loop, tau = point.loop, point.tau
        d = self.loop_derivative(loop)
        if self.bundle.metric.is_flat:
            kin = np.sum(d * d, axis=-1)
        else:
            g = self.bundle.metric.matrix(loop.samples)
            kin = np.einsum("ia,iab,ib->i", d, g, d)
        H = 0.5 * np.exp(-2.0 * tau) * kin + self.bundle.potential.value(loop.samples)
        mean = float(np.mean(H))
        return H, mean, float(np.max(np.abs(H - mean)))

    def euler_lagrange_residual(self, point: LoopPoint):
        """R(s_i) = e^{-tau} nabla_s c' + e^{tau} grad V(c), plus its L^2 norm."""
        loop, tau = point.loop, point.tau
        acc = self.second_derivative(loop)
        if not self.bundle.metric.is_flat:
            gamma = self.bundle.metric.christoffel(loop.samples)
            d = self.loop_derivative(loop)
            acc = acc + np.einsum("ikab,ia,ib->ik", gamma, d, d)
        R = np.exp(-tau) * acc + np.exp(tau) * self.bundle.grad_potential(loop.samples)
        if self.bundle.metric.is_flat:
            sq = np.sum(R * R, axis=-1)
        else:
            g = self.bundle.metric.matrix(loop.samples)
            sq = np.einsum("ia,iab,ib->i", R, g, R)
        return R, float(np.sqrt(np.mean(sq)))


def penalty_tau_derivative(tau: float, eps: float) -> float:
    """d/dtau of the penalty eps (e^{-tau} + e^{tau/2})."""
    return eps * (-np.exp(-tau) + 0.5 * np.exp(0.5 * tau))


# ---------------------------------------------------------------------------
# serialization


def save_loop_csv(path, point: LoopPoint) -> None:
    """Write ``s,q1..qn`` rows at 17 significant digits plus a trailing tau row."""
    loop = point.loop
    n = loop.chart.dimension
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["s"] + [f"q{i + 1}" for i in range(n)])
        for s, row in zip(loop.grid, loop.samples):
            w.writerow([f"{s:.17g}"] + [f"{x:.17g}" for x in row])
        w.writerow(["tau", f"{point.tau:.17g}"] + [""] * (n - 1))


def load_loop_csv(path, chart: ChartDomain) -> LoopPoint:
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    if len(rows) < 3 or rows[0][0] != "s":
        raise OrbitPassError(f"{path}: not a loop CSV (missing header)")
    header_n = len(rows[0]) - 1
    if header_n != chart.dimension:
        raise GeometryError(
            f"{path}: loop has {header_n} coordinates, chart expects {chart.dimension}")
    if rows[-1][0] != "tau":
        raise OrbitPassError(f"{path}: missing trailing tau metadata row")
    tau = float(rows[-1][1])
    samples = np.array([[float(x) for x in row[1:]] for row in rows[1:-1]])
    return LoopPoint(DiscreteLoop.from_samples(samples, chart), tau)
