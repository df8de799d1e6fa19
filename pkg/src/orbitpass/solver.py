"""Minimax solver: linking endpoints, mountain pass, refinement, continuation.

The pipeline realizes the variational existence argument numerically: pin two
low-action endpoints that link the high-action barrier, pull the highest node
of a connecting path downhill until it settles on the saddle, polish the
candidate with damped Gauss-Newton, then continue the penalty strength down to
zero and verify the resulting orbit by direct shooting.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field, replace
from typing import Optional, Sequence

import numpy as np

from .contact import ContactCheckReport, uniform_contact_scan
from .errors import LinkingError, SolverError
from .geometry import GeometryBundle, RegularityReport, regularity_scan
from .loops import (
    DiscreteLoop,
    LoopCalculus,
    LoopPoint,
    TangentField,
    penalty_tau_derivative,
)
from .penalty import (
    PenaltyDiagnostics,
    PenaltySchedule,
    hamiltonian_level,
    level_residual,
    penalized_action,
    ps_identity_residuals,
    tau_bound_check,
)

logger = logging.getLogger("orbitpass.solver")


# ---------------------------------------------------------------------------
# configuration objects


@dataclass
class StepPolicy:
    """Armijo backtracking on the preconditioned gradient direction.

    ``max_move`` caps the H^1 x R displacement of one accepted step; without
    it, nodes whose potential average is positive can tunnel arbitrarily far
    down the unbounded tau direction in a single step.
    """

    initial: float = 1.0
    factor: float = 0.5
    slope: float = 1e-4
    max_backtracks: int = 60
    max_move: float = 2.0


@dataclass
class LinkingConfig:
    """Seeds and constants for the linking endpoints.

    ``base_points`` are chart points with V < 0 (low-period constant-loop
    endpoint); ``waypoints`` are points with V > 0 visited by the seed loop
    (high-period endpoint).  ``rho`` and ``nu`` are recorded for diagnostics:
    they describe the barrier sphere bundle whose action level b separates the
    endpoints.  Leaving ``b``/``sigma1``/``sigma2`` unset fills them from the
    estimates V_max and E_max.
    """

    base_points: Sequence[Sequence[float]]
    waypoints: Sequence[Sequence[float]]
    sigma1: Optional[float] = None
    sigma2: Optional[float] = None
    b: Optional[float] = None
    rho: float = 0.1
    nu: float = 0.1
    dwell: float = 0.9
    margin: float = 0.7
    seed_amplitude: float = 0.2
    path_nodes: int = 33
    # Restrict the search to loops with c(s + 1/2) = -c(s).  A path pinned at
    # two endpoints is a 1-parameter family, which genuinely links across the
    # action barrier only if translating loops sideways out of the potential
    # well is forbidden; for centrally symmetric potentials this restriction
    # is the user's topological assertion that makes the two-endpoint class
    # honest.  Requires V(-q) = V(q), base points at the origin, and waypoints
    # in antipodal pairs.
    half_turn_symmetry: bool = False

    # filled by build_linking_endpoints
    a: Optional[float] = None
    abar: Optional[float] = None
    v_max: Optional[float] = None
    e_max: Optional[float] = None


@dataclass
class LinkingEndpoints:
    config: LinkingConfig
    low: LoopPoint
    high: LoopPoint
    seed_potential_integral: float
    dwell_fraction: float
    action_low: float
    action_high: float


@dataclass
class MinimaxResult:
    candidate: LoopPoint
    c_eps: float
    initial_max: float
    iterations: int
    converged: bool
    grad_norm: float
    max_trace: list
    path: list
    abar: float
    abar_effective: float
    monotone: bool
    reparam_reverts: int


@dataclass
class RefineResult:
    point: LoopPoint
    converged: bool
    grad_norm: float
    iterations: int
    fallback_used: bool = False
    message: str = ""


@dataclass
class DescendResult:
    point: LoopPoint
    converged: bool
    grad_norm: float
    iterations: int


@dataclass
class ShootingReport:
    closure: float
    energy_drift: float
    level_drift: float
    period: float
    steps: int


@dataclass
class OrbitSolution:
    """Accepted orbit at one penalty strength, with all residuals recorded."""

    point: LoopPoint
    eps: float
    action: float
    action_eps: float
    grad_norm: float
    level_residual: float
    el_residual: float
    period: float
    closure: Optional[float] = None
    diagnostics: PenaltyDiagnostics = None
    tolerances: dict = field(default_factory=dict)


@dataclass
class SolveOptions:
    n_samples: int = 128
    scheme: str = "central"
    seed: int = 0
    mp_tol: float = 2e-2
    mp_max_iter: int = 20000
    basin_threshold: float = 0.5
    newton_max_iter: int = 40
    shooting_steps: int = 10000
    tau_abort: float = 50.0
    level_tol: float = 1e-3
    el_tol: float = 1e-2
    closure_tol: float = 5e-3
    dealias: bool = True
    step_policy: StepPolicy = field(default_factory=StepPolicy)
    run_regularity: bool = True
    contact_eps0: Optional[float] = None
    contact_kappa: Optional[float] = None
    r_k: float = 2.0


@dataclass
class SolveResult:
    solution: OrbitSolution
    solutions: list
    minimax: MinimaxResult
    endpoints: LinkingEndpoints
    shooting: ShootingReport
    extrapolated_action: Optional[float]
    extrapolated_tau: Optional[float]
    regularity: Optional[RegularityReport]
    contact: Optional[ContactCheckReport]
    advisory: bool
    t2_bound: Optional[float]
    t3_observed: float
    timings: dict
    options: SolveOptions
    schedule: PenaltySchedule


# ---------------------------------------------------------------------------
# linking endpoints


def _smoothstep(u: np.ndarray) -> np.ndarray:
    u = np.clip(u, 0.0, 1.0)
    return u ** 3 * (10.0 - 15.0 * u + 6.0 * u * u)


def build_seed_loop(waypoints: np.ndarray, n_samples: int, chart,
                    dwell: float = 0.9, amplitude: float = 0.2) -> DiscreteLoop:
    """Closed curve dwelling a fraction ``dwell`` of its time at the waypoints.

    Transitions are quintic ramps (vanishing first and second derivatives at
    the junctions), so the loop is C^2 and its energy is finite and modest.  A
    single waypoint gets an out-and-back excursion of size ``amplitude``.
    """
    pts = np.asarray(waypoints, dtype=float)
    if pts.ndim != 2:
        raise LinkingError("waypoints must be a list of chart points")
    if pts.shape[0] == 1:
        bump = np.zeros_like(pts[0])
        bump[0] = amplitude
        pts = np.stack([pts[0], pts[0] + bump])
    m = pts.shape[0]
    delta = 1.0 - dwell
    s = np.arange(n_samples) / n_samples
    block = np.minimum((s * m).astype(int), m - 1)
    local = s - block / m
    dwell_len = dwell / m
    trans_len = delta / m
    u = np.clip((local - dwell_len) / trans_len, 0.0, 1.0)
    ramp = _smoothstep(u)
    cur = pts[block]
    nxt = pts[(block + 1) % m]
    samples = cur + ramp[:, None] * (nxt - cur)
    # band-limit so the seed resolves on the grid without aliased content
    samples = lowpass_project(samples, frac=1.0 / 3.0)
    return DiscreteLoop.from_samples(samples, chart)


def antisym_project(samples: np.ndarray) -> np.ndarray:
    """Project loop samples onto the half-turn antisymmetric subspace."""
    n = samples.shape[0]
    return 0.5 * (samples - np.roll(samples, -(n // 2), axis=0))


def lowpass_project(samples: np.ndarray, frac: float = 1.0 / 3.0) -> np.ndarray:
    """Zero Fourier modes above ``frac * N`` (the classical 2/3 dealiasing rule).

    The central-difference symbol N sin(2 pi k / N) takes identical values at
    modes k and N/2 - k, so a sawtooth-adjacent partner of every low mode is
    exactly (quadratic potentials) or nearly degenerate in the discrete
    functional; keeping the search band-limited removes those spurious
    directions.  The refined critical point is polished on the full grid
    afterwards.
    """
    n = samples.shape[0]
    spec = np.fft.rfft(samples, axis=0)
    cutoff = int(np.floor(frac * n))
    spec[cutoff + 1:] = 0.0
    return np.fft.irfft(spec, n=n, axis=0)


def compose_projectors(*projectors):
    active = [p for p in projectors if p is not None]
    if not active:
        return None
    if len(active) == 1:
        return active[0]

    def combined(samples):
        for p in active:
            samples = p(samples)
        return samples

    return combined


def _validate_half_turn(bundle, calc, cfg, bases, ways, seed, n_samples, rng):
    if n_samples % 2:
        raise LinkingError("half-turn symmetry needs an even sample count")
    if bundle.chart.periodic_mask.any():
        raise LinkingError("half-turn symmetry is defined for non-periodic charts")
    if np.max(np.abs(bases)) > 1e-12:
        raise LinkingError("half-turn symmetry pins the base point to the origin")
    pts = bundle.chart.sample_box(rng, 256)
    asym = np.max(np.abs(bundle.potential.value(pts) - bundle.potential.value(-pts)))
    if asym > 1e-9:
        raise LinkingError("half-turn symmetry requires an even potential "
                           f"(V(q) - V(-q) reaches {asym:.3g} on the box)")
    defect = np.max(np.abs(seed.samples + np.roll(seed.samples, -(n_samples // 2), axis=0)))
    if defect > 1e-9:
        raise LinkingError("seed loop is not half-turn antisymmetric; order the "
                           "waypoints in antipodal pairs (w, ..., -w, ...)")


def build_linking_endpoints(bundle: GeometryBundle, calc: LoopCalculus,
                            config: LinkingConfig, n_samples: int,
                            rng: Optional[np.random.Generator] = None) -> LinkingEndpoints:
    """Fill the linking constants and construct the two pinned endpoints.

    sigma1 = log(b / 2 V_max) - margin keeps the constant-loop endpoint below
    a = b/2; sigma2 = max(log(E_max / b), sigma1) + margin does the same for
    the seed loop, whose positive potential average drives its action far
    negative.  Rejects seeds that violate the sign conditions.
    """
    rng = rng or np.random.default_rng(0)
    cfg = replace(config)
    bases = np.asarray(cfg.base_points, dtype=float)
    ways = np.asarray(cfg.waypoints, dtype=float)
    if bases.ndim != 2 or bases.shape[0] == 0:
        raise LinkingError("at least one base point is required")
    if ways.ndim != 2 or ways.shape[0] == 0:
        raise LinkingError("no admissible waypoints: provide points with V > 0")
    vb = bundle.potential.value(bases)
    if np.any(vb >= 0):
        bad = bases[np.argmax(vb)]
        raise LinkingError(f"base point {bad.tolist()} has V >= 0; the low endpoint "
                           "must sit in the negative-potential region")
    vw = bundle.potential.value(ways)
    if np.any(vw <= 0):
        bad = ways[np.argmin(vw)]
        raise LinkingError(f"waypoint {bad.tolist()} has V <= 0; seed waypoints "
                           "must carry positive potential")
    cfg.v_max = float(np.max(-vb))

    if cfg.b is None:
        box_pts = bundle.chart.sample_box(rng, 2000)
        v_min = float(np.min(bundle.potential.value(box_pts)))
        v_min = min(v_min, float(np.min(vb)))
        cfg.b = 0.1 * abs(v_min)
    if cfg.b <= 0:
        raise LinkingError("linking level b must be positive")
    cfg.a = 0.5 * cfg.b
    cfg.abar = 0.75 * cfg.b

    seed = build_seed_loop(ways, n_samples, bundle.chart, cfg.dwell, cfg.seed_amplitude)
    if cfg.half_turn_symmetry:
        _validate_half_turn(bundle, calc, cfg, bases, ways, seed, n_samples, rng)
    int_v = calc.potential_integral(seed)
    if int_v <= 0:
        raise LinkingError(f"seed loop fails the positive-potential-average test "
                           f"(integral {int_v:.6g} <= 0); move the waypoints deeper "
                           "into the V > 0 region or raise the dwell fraction")
    cfg.e_max = calc.energy(seed)

    if cfg.sigma1 is None:
        cfg.sigma1 = float(np.log(cfg.b / (2.0 * cfg.v_max)) - cfg.margin)
    if cfg.sigma2 is None:
        cfg.sigma2 = float(max(np.log(cfg.e_max / cfg.b), cfg.sigma1) + cfg.margin)
    if not cfg.sigma1 < cfg.sigma2:
        raise LinkingError(f"sigma1={cfg.sigma1:.6g} must be < sigma2={cfg.sigma2:.6g}")

    base_loop = DiscreteLoop.from_samples(np.tile(bases[0], (n_samples, 1)), bundle.chart)
    low = LoopPoint(base_loop, cfg.sigma1)
    high = LoopPoint(seed, cfg.sigma2)
    a_low = calc.action(low)
    a_high = calc.action(high)
    for name, val in (("low", a_low), ("high", a_high)):
        if val > cfg.a:
            raise LinkingError(f"endpoint gap violated: action({name}) = {val:.6g} "
                               f"> a = {cfg.a:.6g}")

    # fraction of time spent near some waypoint (2% of the waypoint scale
    # absorbs the band-limiting ripple of the seed construction)
    d = np.min(np.linalg.norm(seed.samples[:, None, :] - ways[None, :, :], axis=2), axis=1)
    dwell_frac = float(np.mean(d <= 0.02 * (1.0 + np.max(np.abs(ways)))))

    return LinkingEndpoints(cfg, low, high, float(int_v), dwell_frac,
                            float(a_low), float(a_high))


def initial_path(endpoints: LinkingEndpoints, nodes: int) -> list:
    """Linear interpolation in (samples, tau) between the pinned endpoints."""
    if nodes < 3:
        raise LinkingError("a minimax path needs at least 3 nodes")
    low, high = endpoints.low, endpoints.high
    out = []
    for j in range(nodes):
        t = j / (nodes - 1)
        samples = (1.0 - t) * low.loop.samples + t * high.loop.unwrapped()
        tau = (1.0 - t) * low.tau + t * high.tau
        out.append(LoopPoint(low.loop.replace_samples(samples), tau))
    return out


# ---------------------------------------------------------------------------
# descent primitives


def _finite_action(calc, point, eps):
    with np.errstate(over="ignore", invalid="ignore"):
        try:
            val = penalized_action(calc, point, eps)
        except Exception:
            return np.inf
    return val if np.isfinite(val) else np.inf


def _armijo_step(calc: LoopCalculus, point: LoopPoint, eps: float,
                 policy: StepPolicy, projector=None):
    """One line-searched descent step; returns (new_point, new_value, grad_norm, moved)."""
    grad = calc.h1_gradient(point, penalty_eps=eps)
    gn = calc.h1_norm(grad)
    f0 = _finite_action(calc, point, eps)
    if gn == 0.0 or not np.isfinite(gn):
        return point, f0, gn, False
    alpha = min(policy.initial, policy.max_move / gn)
    target_slope = policy.slope * gn * gn
    for _ in range(policy.max_backtracks):
        samples = point.loop.samples - alpha * grad.xi
        if projector is not None:
            samples = projector(samples)
        trial = LoopPoint(point.loop.replace_samples(samples), point.tau - alpha * grad.sigma)
        f1 = _finite_action(calc, trial, eps)
        if f1 <= f0 - alpha * target_slope:
            return trial, f1, gn, True
        alpha *= policy.factor
    return point, f0, gn, False


def descend(calc: LoopCalculus, point: LoopPoint, eps: float,
            policy: Optional[StepPolicy] = None, tol: float = 1e-6,
            max_iter: int = 2000) -> DescendResult:
    """Preconditioned gradient descent on A_eps with monotone Armijo steps."""
    if tol <= 0:
        raise SolverError("descend", "tolerance must be positive")
    policy = policy or StepPolicy()
    current = point
    gn = np.inf
    for it in range(max_iter):
        grad = calc.h1_gradient(current, penalty_eps=eps)
        gn = calc.h1_norm(grad)
        if gn <= tol:
            return DescendResult(current, True, gn, it)
        new_point, _, _, moved = _armijo_step(calc, current, eps, policy)
        if not moved:
            return DescendResult(current, False, gn, it)
        current = new_point
    return DescendResult(current, False, gn, max_iter)


# ---------------------------------------------------------------------------
# mountain pass


def _node_distance(calc, a: LoopPoint, b: LoopPoint) -> float:
    dxi = a.loop.chart.wrap_difference(b.loop.samples - a.loop.samples)
    return calc.h1_norm(TangentField(dxi, b.tau - a.tau))


def _reparametrize(calc, nodes: list) -> list:
    """Redistribute interior nodes to uniform H^1 x R arclength (piecewise linear).

    Segment lengths are capped at a few times the median so that one node sunk
    deep down a valley cannot starve the crest of path resolution.
    """
    m = len(nodes)
    seg = np.array([_node_distance(calc, nodes[j], nodes[j + 1]) for j in range(m - 1)])
    cap = 5.0 * float(np.median(seg[np.isfinite(seg)])) if np.any(np.isfinite(seg)) else 1.0
    seg = np.minimum(seg, max(cap, 1e-300))
    total = float(np.sum(seg))
    if total <= 0:
        return nodes
    cum = np.concatenate([[0.0], np.cumsum(seg)])
    targets = np.linspace(0.0, total, m)
    out = [nodes[0]]
    for j in range(1, m - 1):
        t = targets[j]
        k = int(np.searchsorted(cum, t, side="right") - 1)
        k = min(max(k, 0), m - 2)
        frac = 0.0 if seg[k] == 0 else (t - cum[k]) / seg[k]
        a, b = nodes[k], nodes[k + 1]
        delta = a.loop.chart.wrap_difference(b.loop.samples - a.loop.samples)
        samples = a.loop.samples + frac * delta
        tau = a.tau + frac * (b.tau - a.tau)
        out.append(LoopPoint(a.loop.replace_samples(samples), tau))
    out.append(nodes[-1])
    return out


def _clipped_step(calc, point: LoopPoint, grad: TangentField, alpha: float,
                  max_move: float, projector=None) -> LoopPoint:
    gn = calc.h1_norm(grad)
    scale = alpha
    if np.isfinite(gn) and gn > 0 and alpha * gn > max_move:
        scale = max_move / gn
    samples = point.loop.samples - scale * grad.xi
    if projector is not None:
        samples = projector(samples)
    return LoopPoint(point.loop.replace_samples(samples), point.tau - scale * grad.sigma)


def _node_field_diff(a: LoopPoint, b: LoopPoint) -> TangentField:
    dxi = a.loop.chart.wrap_difference(b.loop.samples - a.loop.samples)
    return TangentField(dxi, b.tau - a.tau)


def slave_tau(calc: LoopCalculus, loop, eps: float, tau_lo: float, tau_hi: float):
    """Minimize A_eps(loop, tau) over tau in [tau_lo, tau_hi].

    Eliminating tau by its per-loop minimizer turns the path search into one
    over loop shapes with the reduced value min_tau A_eps; the unbounded
    descent direction tau -> +inf past the {W = 0} crossing (against which
    the e^{tau/2} penalty is powerless as eps -> 0) is thereby quotiented out
    of the path class.  For loops with negative potential average the
    minimizer is interior and unique (the reduced value is the penalized
    analogue of 2 sqrt(E |W|)), so tau-stationarity holds automatically at
    the crest.  Returns (tau*, value).
    """
    energy = calc.energy(loop)
    pot = calc.potential_integral(loop)

    def phi(tau):
        return ((energy + eps) * np.exp(-tau) - pot * np.exp(tau)
                + eps * np.exp(0.5 * tau))

    grid = np.linspace(tau_lo, tau_hi, 65)
    with np.errstate(over="ignore"):
        vals = ((energy + eps) * np.exp(-grid) - pot * np.exp(grid)
                + eps * np.exp(0.5 * grid))
    vals = np.where(np.isfinite(vals), vals, np.inf)
    i = int(np.argmin(vals))
    lo = grid[max(i - 1, 0)]
    hi = grid[min(i + 1, len(grid) - 1)]
    # golden-section polish on the bracketing interval
    invphi = (np.sqrt(5.0) - 1.0) / 2.0
    a, b = lo, hi
    c = b - invphi * (b - a)
    d = a + invphi * (b - a)
    fc, fd = phi(c), phi(d)
    for _ in range(60):
        if fc < fd:
            b, d, fd = d, c, fc
            c = b - invphi * (b - a)
            fc = phi(c)
        else:
            a, c, fc = c, d, fd
            d = a + invphi * (b - a)
            fd = phi(d)
        if b - a < 1e-12 * (1.0 + abs(a)):
            break
    tau = 0.5 * (a + b)
    return float(tau), float(phi(tau))


def _transverse_part(calc, grad: TangentField, tangent: TangentField) -> TangentField:
    tn = calc.h1_norm(tangent)
    if not np.isfinite(tn) or tn == 0.0:
        return grad
    unit = TangentField(tangent.xi / tn, tangent.sigma / tn)
    coef = calc.h1_pairing(grad, unit)
    return TangentField(grad.xi - coef * unit.xi, grad.sigma - coef * unit.sigma)


def _line_search(calc, point, eps, direction, slope, policy, projector):
    """Armijo on A_eps along -direction; slope is the directional derivative."""
    f0 = _finite_action(calc, point, eps)
    dn = calc.h1_norm(direction)
    if dn == 0.0 or not np.isfinite(dn) or slope <= 0:
        return point, f0, False
    alpha = min(policy.initial, policy.max_move / dn)
    for _ in range(policy.max_backtracks):
        samples = point.loop.samples - alpha * direction.xi
        if projector is not None:
            samples = projector(samples)
        trial = LoopPoint(point.loop.replace_samples(samples),
                          point.tau - alpha * direction.sigma)
        f1 = _finite_action(calc, trial, eps)
        if f1 <= f0 - policy.slope * alpha * slope:
            return trial, f1, True
        alpha *= policy.factor
    return point, f0, False


def _interpolate_crest(calc, nodes, vals, k, reslave):
    """Quadratic-vertex estimate of the polyline's crest around node k."""
    left = _node_distance(calc, nodes[k - 1], nodes[k])
    right = _node_distance(calc, nodes[k], nodes[k + 1])
    if not (np.isfinite(left) and np.isfinite(right)) or left + right == 0:
        return nodes[k]
    # parabola through (-left, v_{k-1}), (0, v_k), (right, v_{k+1})
    vl, v0, vr = vals[k - 1], vals[k], vals[k + 1]
    denom = left * right * (left + right)
    a = (right * (vl - v0) + left * (vr - v0)) / denom
    b = (left * left * (vr - v0) - right * right * (vl - v0)) / denom
    if a >= 0:
        return nodes[k]
    u = float(np.clip(-b / (2.0 * a), -left, right))
    if u >= 0:
        other, frac = nodes[k + 1], (0.0 if right == 0 else u / right)
    else:
        other, frac = nodes[k - 1], (0.0 if left == 0 else -u / left)
    delta = _node_field_diff(nodes[k], other)
    samples = nodes[k].loop.samples + frac * delta.xi
    point, _ = reslave(nodes[k].loop.replace_samples(samples))
    return point


def _climb_to_saddle(calc, start: LoopPoint, tangent: TangentField, eps: float,
                     tol: float, projector, reslave, max_steps: int = 400,
                     max_move: float = 2.0):
    """Climbing-image iteration off the path: descend transversally to the
    (fixed) path tangent while ascending along it, with tau slaved to its
    per-loop minimizer, until the full H^1 x R gradient of the penalized
    action drops below ``tol``."""
    tn = calc.h1_norm(tangent)
    if not np.isfinite(tn) or tn == 0:
        grad = calc.h1_gradient(start, penalty_eps=eps)
        return start, calc.h1_norm(grad), False
    unit = TangentField(tangent.xi / tn, 0.0)
    point = start
    grad = calc.h1_gradient(point, penalty_eps=eps)
    gn = calc.h1_norm(grad)
    alpha = 0.25
    for _ in range(max_steps):
        if gn <= tol:
            return point, gn, True
        coef = calc.h1_pairing(TangentField(grad.xi, 0.0), unit)
        direction = grad.xi - 2.0 * coef * unit.xi
        dn = calc.h1_norm(TangentField(direction, 0.0))
        if not np.isfinite(dn) or dn == 0:
            return point, gn, False
        step = min(alpha, max_move / dn)
        samples = point.loop.samples - step * direction
        if projector is not None:
            samples = projector(samples)
        trial, _ = reslave(point.loop.replace_samples(samples))
        tgrad = calc.h1_gradient(trial, penalty_eps=eps)
        tgn = calc.h1_norm(tgrad)
        if np.isfinite(tgn) and tgn <= gn:
            point, grad, gn = trial, tgrad, tgn
            alpha = min(alpha * 1.25, 0.5)
        else:
            alpha *= 0.5
            if alpha < 1e-8:
                return point, gn, False
    return point, gn, gn <= tol


def mountain_pass(calc: LoopCalculus, path: list, eps: float, tol: float = 2e-2,
                  max_iter: int = 20000, abar: float = 0.0,
                  policy: Optional[StepPolicy] = None,
                  projector=None, stall_iters: int = 30,
                  tau_bounds: Optional[tuple] = None,
                  climb_every: int = 25, reparam_every: int = 4) -> MinimaxResult:
    """Lower the highest node of the path until it hangs over a critical point.

    The path is a chain of loops whose log-periods are slaved to the per-loop
    minimizer of the penalized action (see :func:`slave_tau`); node values are
    the reduced actions.  Phase one relaxes the path as a string: every live
    node (value above the endpoint sublevel) descends only transversally to
    the local path tangent, so nodes cannot slide along the path into the
    endpoint basins, and the path is redistributed to near-uniform arclength
    (redistributions that would raise the maximum are reverted).  Every
    accepted operation leaves the per-iteration path maximum non-increasing,
    which is asserted.

    Once the string stalls, phase two locates the crest by quadratic
    interpolation around the maximal node (lowest index on ties) and refines
    it with a climbing-image iteration off the path, which reverses the
    tangential gradient component; the path itself is not touched, so the
    monotonicity of the path maximum is preserved while the candidate's full
    gradient is driven below ``tol``.

    A maximum that migrates onto a pinned endpoint, or sinks to the endpoint
    sublevel, means the configured endpoints do not link across a barrier.
    """
    policy = policy or StepPolicy()
    if tau_bounds is None:
        taus = [p.tau for p in path]
        tau_bounds = (min(taus), max(taus))
    tau_lo, tau_hi = tau_bounds
    if not tau_lo < tau_hi:
        raise LinkingError("mountain pass needs a nonempty tau range")

    def reslave(samples_or_loop):
        loop = samples_or_loop
        if isinstance(loop, np.ndarray):
            raise TypeError
        tau, val = slave_tau(calc, loop, eps, tau_lo, tau_hi)
        return LoopPoint(loop, tau), val

    def make_node(loop):
        if projector is not None:
            loop = loop.replace_samples(projector(loop.samples))
        return reslave(loop)

    nodes = []
    vals = []
    for p in path:
        point, val = make_node(p.loop)
        nodes.append(point)
        vals.append(val)
    vals = np.array(vals)
    m = len(nodes)
    if m < 3:
        raise LinkingError("a minimax path needs at least 3 nodes")
    endpoint_level = max(vals[0], vals[-1])
    if not np.isfinite(endpoint_level):
        raise LinkingError("endpoint actions are not finite")
    abar_eff = max(abar, endpoint_level * (1.0 + 1e-9) + 1e-15)
    initial_max = float(np.max(vals))
    max_trace = [initial_max]
    monotone = True
    reparam_reverts = 0
    stall_count = 0
    it = 0

    def try_climb(k, budget):
        crest = _interpolate_crest(calc, nodes, vals, k, reslave_loop)
        tangent = TangentField(_node_field_diff(nodes[k - 1], nodes[k + 1]).xi, 0.0)
        return _climb_to_saddle(calc, crest, tangent, eps, tol, projector,
                                reslave_loop, max_steps=budget)

    def reslave_loop(loop):
        return reslave(loop)

    for it in range(max_iter):
        k = int(np.argmax(vals))
        if k == 0 or k == m - 1:
            raise LinkingError("path collapse: the action maximum migrated to a "
                               "pinned endpoint; the endpoints do not link "
                               "(for a centrally symmetric potential consider "
                               "half_turn_symmetry)")
        if vals[k] <= abar_eff:
            raise LinkingError("path collapse: the path maximum fell to the "
                               "endpoint sublevel without a critical point")
        prev_max = float(vals[k])
        slack = 1e-10 * (1.0 + abs(prev_max))

        moved_any = False
        for j in range(1, m - 1):
            if j != k and vals[j] <= abar_eff:
                continue
            grad = calc.h1_gradient(nodes[j], penalty_eps=eps)
            tangent = TangentField(_node_field_diff(nodes[j - 1], nodes[j + 1]).xi, 0.0)
            direction = _transverse_part(calc, TangentField(grad.xi, 0.0), tangent)
            slope = calc.h1_norm(direction) ** 2
            dn = calc.h1_norm(direction)
            if dn == 0.0 or not np.isfinite(dn) or slope <= 0:
                continue
            f0 = vals[j]
            alpha = min(policy.initial, policy.max_move / dn)
            for _ in range(policy.max_backtracks):
                samples = nodes[j].loop.samples - alpha * direction.xi
                if projector is not None:
                    samples = projector(samples)
                trial, f1 = reslave(nodes[j].loop.replace_samples(samples))
                if f1 <= f0 - policy.slope * alpha * slope:
                    nodes[j] = trial
                    vals[j] = f1
                    moved_any = True
                    break
                alpha *= policy.factor

        if (it + 1) % reparam_every == 0:
            tentative = _reparametrize(calc, nodes)
            tnodes, tvals = [tentative[0]], [vals[0]]
            for p in tentative[1:-1]:
                point, val = make_node(p.loop)
                tnodes.append(point)
                tvals.append(val)
            tnodes.append(tentative[-1])
            tvals.append(vals[-1])
            tvals = np.array(tvals)
            if float(np.max(tvals)) <= float(np.max(vals)) + slack:
                nodes, vals = tnodes, tvals
            else:
                reparam_reverts += 1

        new_max = float(np.max(vals))
        if new_max > prev_max + slack:
            monotone = False
            logger.warning("mountain pass maximum increased at iteration %d", it)
        max_trace.append(new_max)

        stalled_now = (not moved_any) or prev_max - new_max <= 1e-9 * (1.0 + abs(prev_max))
        stall_count = stall_count + 1 if stalled_now else 0
        if (it + 1) % climb_every == 0 or stall_count >= stall_iters:
            k = int(np.argmax(vals))
            if 0 < k < m - 1:
                candidate, gn, ok = try_climb(k, budget=120 if stall_count < stall_iters
                                              else 400)
                if ok:
                    c_eps = _finite_action(calc, candidate, eps)
                    logger.info("mountain pass converged after %d string iterations, "
                                "C_eps=%.6g", it + 1, c_eps)
                    return MinimaxResult(candidate, float(c_eps), initial_max, it + 1,
                                         True, gn, max_trace, nodes, abar, abar_eff,
                                         monotone, reparam_reverts)
            if stall_count >= stall_iters:
                break

    k = int(np.argmax(vals))
    if k == 0 or k == m - 1:
        raise LinkingError("path collapse: the action maximum migrated to a "
                           "pinned endpoint; the endpoints do not link")
    candidate, gn, ok = try_climb(k, budget=400)
    c_eps = _finite_action(calc, candidate, eps)
    if ok:
        logger.info("mountain pass converged after %d string iterations, C_eps=%.6g",
                    it + 1, c_eps)
    else:
        logger.warning("mountain pass candidate stuck at |grad|=%.3g (tol %.3g)", gn, tol)
    return MinimaxResult(candidate, float(c_eps), initial_max, it + 1, bool(ok), gn,
                         max_trace, nodes, abar, abar_eff, monotone, reparam_reverts)


# ---------------------------------------------------------------------------
# Newton refinement


def _stationarity_residual(calc: LoopCalculus, point: LoopPoint, eps: float) -> np.ndarray:
    r, r_tau = calc.action_gradient(point)
    r_tau += penalty_tau_derivative(point.tau, eps)
    return np.concatenate([r.ravel(), [r_tau]])


def refine(calc: LoopCalculus, point: LoopPoint, eps: float, tol: float = 1e-9,
           basin_threshold: float = 0.5, max_iter: int = 40,
           fd_step: float = 1e-6, projector=None) -> RefineResult:
    """Damped Gauss-Newton on the full discrete stationarity system.

    The s-rotation symmetry is removed by pinning the sample coordinate with
    the largest |c'| at entry; the remaining rectangular system is solved in
    the least-squares sense with backtracking on the residual norm.  A
    ``projector`` (band limiting, symmetry restriction) constrains the trial
    points; convergence is still measured with the full unprojected gradient.
    Points outside the basin (gradient norm above ``basin_threshold``) are
    returned unchanged with a failure flag so callers can fall back to
    descent.
    """
    n, dim = point.loop.samples.shape
    if projector is not None:
        point = LoopPoint(point.loop.replace_samples(projector(point.loop.samples)),
                          point.tau)
    grad0 = calc.h1_gradient(point, penalty_eps=eps)
    gn0 = calc.h1_norm(grad0)
    if gn0 > basin_threshold:
        return RefineResult(point, False, gn0, 0, False,
                            f"gradient norm {gn0:.3g} outside the Newton basin")
    d = calc.loop_derivative(point.loop)
    pin_flat = int(np.argmax(np.abs(d)))  # flattened (sample, coordinate) index
    free = np.ones(n * dim + 1, dtype=bool)
    free[pin_flat] = False

    def pack(pt):
        return np.concatenate([pt.loop.samples.ravel(), [pt.tau]])

    def unpack(x):
        samples = x[:-1].reshape(n, dim)
        if projector is not None:
            samples = projector(samples)
        return LoopPoint(point.loop.replace_samples(samples), float(x[-1]))

    x = pack(point)
    F = _stationarity_residual(calc, unpack(x), eps)
    fnorm = np.linalg.norm(F)
    current = unpack(x)
    for it in range(max_iter):
        grad = calc.h1_gradient(current, penalty_eps=eps)
        gn = calc.h1_norm(grad)
        if gn <= tol:
            return RefineResult(current, True, gn, it)
        # central differences keep the column error at O(h^2); forward
        # differences would hand exactly-degenerate directions (aliased mode
        # pairs) a spurious singular value above the rcond cutoff
        J = np.empty((F.size, int(np.sum(free))))
        col = 0
        for idx in range(x.size):
            if not free[idx]:
                continue
            xp = x.copy()
            xm = x.copy()
            xp[idx] += fd_step
            xm[idx] -= fd_step
            J[:, col] = (_stationarity_residual(calc, unpack(xp), eps)
                         - _stationarity_residual(calc, unpack(xm), eps)) / (2 * fd_step)
            col += 1
        try:
            # the relative cutoff suppresses steps along near-degenerate
            # directions (aliased mode pairs of the central scheme, loop
            # symmetries), which least squares would otherwise amplify
            step, *_ = np.linalg.lstsq(J, -F, rcond=1e-8)
        except np.linalg.LinAlgError:
            fb = descend(calc, current, eps, tol=tol, max_iter=200)
            return RefineResult(fb.point, fb.converged, fb.grad_norm, it, True,
                                "linear solve failed; fell back to descent")
        alpha = 1.0
        while alpha > 1e-8:
            xt = x.copy()
            xt[free] += alpha * step
            Ft = _stationarity_residual(calc, unpack(xt), eps)
            if np.linalg.norm(Ft) <= (1.0 - 1e-4 * alpha) * fnorm:
                break
            alpha *= 0.5
        else:
            fb = descend(calc, current, eps, tol=tol, max_iter=200)
            return RefineResult(fb.point, fb.converged, fb.grad_norm, it, True,
                                "Newton damping stalled; fell back to descent")
        x = xt
        F = Ft
        fnorm = np.linalg.norm(F)
        current = unpack(x)
    grad = calc.h1_gradient(current, penalty_eps=eps)
    return RefineResult(current, False, calc.h1_norm(grad), max_iter, False,
                        "iteration cap reached")


# ---------------------------------------------------------------------------
# continuation and verification


def make_solution(calc: LoopCalculus, point: LoopPoint, eps: float, grad_norm: float,
                  a2: Optional[float] = None, a_kappa: Optional[float] = None,
                  tolerances: Optional[dict] = None) -> OrbitSolution:
    action = calc.action(point)
    a_eps = penalized_action(calc, point, eps)
    lvl = level_residual(calc, point, eps)
    _, el = calc.euler_lagrange_residual(point)
    diag = PenaltyDiagnostics(
        eps=eps, a_eps=a_eps,
        residuals=ps_identity_residuals(calc, point, eps, a_eps=a_eps),
        eps_tilde=hamiltonian_level(eps, point.tau),
        level_residual=lvl, tau=point.tau,
        tau_flags=tau_bound_check(point, eps, a2, a_kappa) if a2 is not None else None,
        grad_norm=grad_norm)
    return OrbitSolution(point=point, eps=eps, action=float(action), action_eps=float(a_eps),
                         grad_norm=float(grad_norm), level_residual=float(lvl),
                         el_residual=float(el), period=point.period,
                         diagnostics=diag, tolerances=dict(tolerances or {}))


def continue_epsilon(calc: LoopCalculus, start: LoopPoint, schedule: PenaltySchedule,
                     *, a2: Optional[float] = None, a_kappa: Optional[float] = None,
                     basin_threshold: float = 0.5, newton_max_iter: int = 40,
                     tau_abort: float = 50.0, tolerances: Optional[dict] = None,
                     projector=None):
    """Warm-started refinement down the eps schedule, with tau monitoring.

    Returns the per-eps solutions plus the linear-in-eps extrapolations of the
    action and tau to eps = 0 (single-eps schedules skip the extrapolation).
    The empirical lower bound T3 = min tau_eps is recorded by the caller.
    """
    solutions = []
    current = start
    for eps, tol in zip(schedule.epsilons, schedule.tolerances):
        res = refine(calc, current, eps, tol=tol, basin_threshold=basin_threshold,
                     max_iter=newton_max_iter, projector=projector)
        if not res.converged:
            raise SolverError("continuation",
                              f"refinement at eps={eps:g} failed: {res.message}")
        current = res.point
        if abs(current.tau) > tau_abort:
            raise SolverError("continuation",
                              f"tau diverged to {current.tau:.3g} at eps={eps:g}; the "
                              "flat-ends period bounds look violated for this geometry")
        sol = make_solution(calc, current, eps, res.grad_norm, a2=a2, a_kappa=a_kappa,
                            tolerances=tolerances)
        logger.info("eps=%g: action=%.8g tau=%.6g |grad|=%.3g", eps, sol.action,
                    current.tau, res.grad_norm)
        solutions.append(sol)
    if len(solutions) >= 2:
        tail = solutions[-3:] if len(solutions) >= 3 else solutions
        e = np.array([s.eps for s in tail])
        act = np.array([s.action for s in tail])
        taus = np.array([s.point.tau for s in tail])
        extrap_a = float(np.polyfit(e, act, 1)[1])
        extrap_t = float(np.polyfit(e, taus, 1)[1])
    else:
        extrap_a = None
        extrap_t = None
    return solutions, extrap_a, extrap_t


def verify_orbit(bundle: GeometryBundle, calc: LoopCalculus, point: LoopPoint,
                 eps: float, steps: int = 10000) -> ShootingReport:
    """Integrate the Hamiltonian flow for one period from the loop's initial data.

    Reports the phase-space closure distance |state(T) - state(0)| and the
    drift of H away from the expected penalty level along the trajectory.
    """
    if steps < 100:
        raise SolverError("verify", "shooting needs at least 100 steps")
    q0 = point.loop.samples[0].copy()
    d0 = calc.loop_derivative(point.loop)[0]
    v0 = np.exp(-point.tau) * d0
    if bundle.metric.is_flat:
        th0 = v0.copy()
    else:
        th0 = bundle.metric.matrix(q0) @ v0
    T = point.period
    dt = T / steps
    level = hamiltonian_level(eps, point.tau)
    q, th = q0.copy(), th0.copy()
    drift = 0.0
    h0 = float(bundle.hamiltonian(q0, th0))
    energy_drift = 0.0
    check_every = max(1, steps // 512)
    for k in range(steps):
        q, th = bundle.flow_rk4(q, th, dt)
        if k % check_every == 0 or k == steps - 1:
            h = float(bundle.hamiltonian(q, th))
            drift = max(drift, abs(h - level))
            energy_drift = max(energy_drift, abs(h - h0))
    dq = bundle.chart.wrap_difference(q - q0)
    closure = float(np.sqrt(np.sum(dq * dq) + np.sum((th - th0) ** 2)))
    return ShootingReport(closure, energy_drift, drift, T, steps)


# ---------------------------------------------------------------------------
# the full pipeline


def solve(bundle: GeometryBundle, linking: LinkingConfig, schedule: PenaltySchedule,
          options: Optional[SolveOptions] = None) -> SolveResult:
    """build endpoints -> mountain pass at the largest eps -> refine ->
    continuation to the smallest eps -> shooting verification.

    Deterministic for a fixed config and seed: every sampler derives its
    stream from ``options.seed``.
    """
    import time as _time

    options = options or SolveOptions()
    timings = {}
    children = np.random.SeedSequence(options.seed).spawn(4)
    calc = LoopCalculus(bundle, options.scheme)

    def staged(stage, fn):
        t0 = _time.perf_counter()
        try:
            out = fn()
        except (LinkingError, SolverError):
            raise
        except Exception as exc:
            raise SolverError(stage, str(exc)) from exc
        timings[stage] = _time.perf_counter() - t0
        return out

    regularity = None
    advisory = False
    if options.run_regularity:
        regularity = staged("regularity", lambda: regularity_scan(
            bundle, r_k=options.r_k, seed=int(children[0].generate_state(1)[0])))
        advisory = not regularity.passed
        if advisory:
            logger.warning("regularity scan FAILED; continuing with an advisory report")

    contact_report = None
    a_kappa = None
    if options.contact_eps0 is not None:
        contact_report = staged("contact", lambda: uniform_contact_scan(
            bundle, options.contact_eps0, options.contact_kappa,
            r_k=options.r_k, seed=int(children[1].generate_state(1)[0]),
            regularity=regularity))
        a_kappa = contact_report.a_kappa

    endpoints = staged("linking", lambda: build_linking_endpoints(
        bundle, calc, linking, options.n_samples,
        rng=np.random.default_rng(children[2])))

    path = staged("path", lambda: initial_path(endpoints, endpoints.config.path_nodes))
    projector = compose_projectors(
        lowpass_project if options.dealias else None,
        antisym_project if endpoints.config.half_turn_symmetry else None)

    eps0 = schedule.epsilons[0]
    minimax = staged("mountain-pass", lambda: mountain_pass(
        calc, path, eps0, tol=options.mp_tol, max_iter=options.mp_max_iter,
        abar=endpoints.config.abar, policy=options.step_policy, projector=projector,
        tau_bounds=(endpoints.config.sigma1, endpoints.config.sigma2)))
    if not minimax.converged:
        raise SolverError("mountain-pass",
                          f"no candidate below gradient tolerance {options.mp_tol:g} "
                          f"within {options.mp_max_iter} iterations")

    a2 = minimax.initial_max
    if schedule.a1 is None:
        schedule.a1 = endpoints.config.abar
    if schedule.a2 is None:
        schedule.a2 = a2

    tolerances = {"grad": schedule.tolerances[-1], "level": options.level_tol,
                  "el": options.el_tol, "closure": options.closure_tol}

    def run_continuation():
        return continue_epsilon(calc, minimax.candidate, schedule, a2=schedule.a2,
                                a_kappa=a_kappa, basin_threshold=options.basin_threshold,
                                newton_max_iter=options.newton_max_iter,
                                tau_abort=options.tau_abort, tolerances=tolerances,
                                projector=projector)

    solutions, extrap_a, extrap_t = staged("continuation", run_continuation)
    final = solutions[-1]

    shooting = staged("verify", lambda: verify_orbit(
        bundle, calc, final.point, final.eps, steps=options.shooting_steps))
    final.closure = shooting.closure

    t2 = None
    if a_kappa is not None and a_kappa > 0:
        t2 = max(0.0, float(np.log(schedule.a2 / a_kappa)))
    t3 = float(min(s.point.tau for s in solutions))

    return SolveResult(solution=final, solutions=solutions, minimax=minimax,
                       endpoints=endpoints, shooting=shooting,
                       extrapolated_action=extrap_a, extrapolated_tau=extrap_t,
                       regularity=regularity, contact=contact_report,
                       advisory=advisory, t2_bound=t2, t3_observed=t3,
                       timings=timings, options=options, schedule=schedule)
