"""The smooth sup-norm surrogate, its path derivatives, and the Lyapunov machinery.

For a path x and time t, with S = sup-norm of the stopped path and c = |x(t)|:

    value  = (S^2 - c^2)^2 / S^2 + 2 c^2        (0 when S = 0)
    d/dx   = 4 (c^2 / S^2) x(t)                 (0 when S = 0)
    d/dt   = 0

The value is sandwiched between kappa * S^2 and 3 * S^2 with
kappa = (3 - sqrt(5)) / 2, which drives both the penalty used for path
comparisons and the decaying Lyapunov function used by feedback strategies.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass

import numpy as np

from .errors import ContractError, DomainError, ParameterError
from .pathcore import Path, kappa_constant, stop_path

ZERO_BRANCH_TOL = 1e-14
SMOOTHNESS_RATIO_BOUND = 1.2


@dataclass(frozen=True, eq=False)
class UpsilonEval:
    """Value and path derivatives of the sup-norm surrogate at one (t, x)."""

    value: float
    dx: np.ndarray
    dt: float = 0.0


@dataclass(frozen=True, eq=False)
class PenaltyEval:
    """Penalty of a path pair: value, the theta ratio in [0, 4], and the gradient."""

    value: float
    theta: float
    grad: np.ndarray


def _surrogate_terms(sup_sq: float, cur_sq: float):
    """(value, factor) where the x-derivative is factor * x(t); handles the zero branch.

    Works with squared norms: the running maximum of squares includes the
    current square, so cur_sq <= sup_sq holds exactly in floating point and
    the factor (= theta against the zero path) never exceeds 4.
    """
    if sup_sq <= (ZERO_BRANCH_TOL * (1.0 + math.sqrt(cur_sq))) ** 2:
        return 0.0, 0.0
    value = (sup_sq - cur_sq) ** 2 / sup_sq + 2.0 * cur_sq
    return value, 4.0 * cur_sq / sup_sq


def upsilon(t: float, x: Path) -> UpsilonEval:
    """Evaluate the surrogate at (t, x); dt is identically zero."""
    xt = x.value_at(t)
    cur_sq = float(np.dot(xt, xt))
    value, factor = _surrogate_terms(_stopped_sup_sq(x, t, cur_sq), cur_sq)
    return UpsilonEval(value=value, dx=factor * xt, dt=0.0)


def _stopped_sup_sq(x: Path, t: float, cur_sq: float) -> float:
    """max of squared node norms up to t, including the interpolated value at t."""
    x.grid.require_contains(t)
    nodes = x.grid.nodes
    mask = nodes <= t + 1e-12
    best = float(np.max(np.sum(x.values[mask] ** 2, axis=1))) if np.any(mask) else 0.0
    return max(best, cur_sq)


def penalty_psi(t: float, x: Path, y: Path) -> PenaltyEval:
    """Penalty of (x, y): surrogate of the difference path.

    theta = 4 |x(t)-y(t)|^2 / sup^2 lies in [0, 4]; the gradient is
    theta * (x(t) - y(t)).  Satisfies kappa*sup^2 <= value <= 3*sup^2.
    """
    diff = x - y
    dt_vec = diff.value_at(t)
    cur_sq = float(np.dot(dt_vec, dt_vec))
    value, theta = _surrogate_terms(_stopped_sup_sq(diff, t, cur_sq), cur_sq)
    return PenaltyEval(value=value, theta=theta, grad=theta * dt_vec)


@dataclass(frozen=True)
class LyapunovParams:
    """Parameters of the decaying Lyapunov function nu.

    alpha(t) = (exp(-2*lambda_L*t/kappa) - eps*sqrt(kappa)) / eps stays positive
    on [0, horizon] exactly when eps <= epsilon0, with
    epsilon0 = exp(-2*lambda_L*horizon/kappa) / (2 sqrt(kappa)).
    """

    epsilon: float
    lambda_L: float
    horizon: float
    kappa: float = None
    epsilon0: float = None

    def __post_init__(self):
        if not self.lambda_L > 0:
            raise ParameterError("lambda_L must be > 0")
        if not self.horizon > 0:
            raise ParameterError("horizon must be > 0")
        kappa = kappa_constant()
        eps0 = math.exp(-2.0 * self.lambda_L * self.horizon / kappa) / (2.0 * math.sqrt(kappa))
        object.__setattr__(self, "kappa", kappa)
        object.__setattr__(self, "epsilon0", eps0)
        if not (0.0 < self.epsilon <= eps0 * (1.0 + 1e-12)):
            raise ParameterError(
                f"epsilon must lie in (0, {eps0:.6e}], got {self.epsilon:.6e}")

    @classmethod
    def at_epsilon0(cls, lambda_L: float, horizon: float) -> "LyapunovParams":
        kappa = kappa_constant()
        eps0 = math.exp(-2.0 * lambda_L * horizon / kappa) / (2.0 * math.sqrt(kappa))
        return cls(epsilon=eps0, lambda_L=lambda_L, horizon=horizon)

    def alpha(self, t: float) -> float:
        return (math.exp(-2.0 * self.lambda_L * t / self.kappa)
                - self.epsilon * math.sqrt(self.kappa)) / self.epsilon

    def alpha_prime(self, t: float) -> float:
        return -(2.0 * self.lambda_L / self.kappa) \
            * math.exp(-2.0 * self.lambda_L * t / self.kappa) / self.epsilon

    def beta(self, upsilon_value: float) -> float:
        return math.sqrt(self.epsilon ** 4 + upsilon_value)


@dataclass(frozen=True, eq=False)
class NuEval:
    """Value and path derivatives of the Lyapunov function at one (t, x)."""

    value: float
    dt: float
    dx: np.ndarray


def lyapunov_nu(params: LyapunovParams, t: float, x: Path) -> NuEval:
    """nu(t, x) = alpha(t) * sqrt(eps^4 + surrogate(t, x)) with its derivatives."""
    xt = x.value_at(t)
    cur_sq = float(np.dot(xt, xt))
    ups, factor = _surrogate_terms(_stopped_sup_sq(x, t, cur_sq), cur_sq)
    alpha = params.alpha(t)
    beta = params.beta(ups)
    # factor = theta(t, x, 0); dx = alpha/(2 beta) * theta * x(t)
    return NuEval(value=alpha * beta, dt=params.alpha_prime(t) * beta,
                  dx=(alpha / (2.0 * beta)) * factor * xt)


# ---------------------------------------------------------------------------
# chain-rule verification
# ---------------------------------------------------------------------------

@dataclass(frozen=True, eq=False)
class ChainRuleReport:
    """Refinement study of the functional chain rule along one path segment.

    levels holds (n_steps, lhs, rhs, gap) per refinement; observed_orders are
    log2 gap ratios between consecutive levels.  `exact` marks gaps at the
    rounding floor, where no order can be measured.
    """

    functional: str
    t0: float
    t1: float
    levels: tuple
    observed_orders: tuple
    order_estimate: float
    kink_count: int
    exact: bool

    def to_json_obj(self) -> dict:
        return {
            "functional": self.functional,
            "t0": self.t0,
            "t1": self.t1,
            "levels": [list(level) for level in self.levels],
            "observed_orders": list(self.observed_orders),
            "order_estimate": self.order_estimate,
            "kink_count": self.kink_count,
            "exact": self.exact,
        }

    def to_json(self) -> str:
        return json.dumps(self.to_json_obj(), sort_keys=True)


def _functional_profile(name: str, x: Path, params: LyapunovParams, companion):
    """Per-node (phi, d/dt phi, d/dx phi) arrays along the whole path."""
    if name == "psi-slice":
        if companion is None:
            raise DomainError("psi-slice needs a constant companion point")
        x = x - Path.constant(x.grid, companion)
        name = "upsilon"
    cur_sq = np.sum(x.values ** 2, axis=1)
    sup_sq = np.maximum.accumulate(cur_sq)
    n = len(cur_sq)
    values = np.zeros(n)
    factors = np.zeros(n)
    live = sup_sq > (ZERO_BRANCH_TOL * (1.0 + np.sqrt(cur_sq))) ** 2
    denom = np.where(live, sup_sq, 1.0)
    values[live] = ((denom - cur_sq) ** 2 / denom + 2.0 * cur_sq)[live]
    factors[live] = (4.0 * cur_sq / denom)[live]
    dx = factors[:, None] * x.values

    if name == "upsilon":
        return values, np.zeros(n), dx
    if name == "nu":
        if params is None:
            raise DomainError("nu needs LyapunovParams")
        t_nodes = x.grid.nodes
        alpha = np.array([params.alpha(t) for t in t_nodes])
        alpha_p = np.array([params.alpha_prime(t) for t in t_nodes])
        beta = np.sqrt(params.epsilon ** 4 + values)
        return alpha * beta, alpha_p * beta, (alpha / (2.0 * beta))[:, None] * dx
    raise DomainError(f"unknown functional {name!r}")


def _check_smooth_segment(x: Path, k0: int, k1: int, ratio_bound: float):
    nodes = x.grid.nodes
    if k1 - k0 < 2:
        return
    dt = np.diff(nodes[k0:k1 + 1])[:, None]
    slopes = np.diff(x.values[k0:k1 + 1], axis=0) / dt
    jumps = np.linalg.norm(np.diff(slopes, axis=0), axis=1)
    peak = float(np.max(np.linalg.norm(slopes, axis=1)))
    worst = float(np.max(jumps)) if len(jumps) else 0.0
    if worst > 0.0 and worst / max(peak, 1e-12) > ratio_bound:
        raise ContractError(
            f"non-smooth segment: slope jump ratio {worst / max(peak, 1e-12):.3f} "
            f"exceeds {ratio_bound}")


def verify_chain_rule(functional: str, x: Path, t0: float, t1: float, *,
                      params: LyapunovParams = None, companion=None,
                      refinements: int = 3,
                      smoothness_bound: float = SMOOTHNESS_RATIO_BOUND) -> ChainRuleReport:
    """Compare phi(t1,x) - phi(t0,x) against the chain-rule quadrature under refinement.

    The right-hand side integrates d/dt phi + (x', d/dx phi) by composite
    trapezoid on the path grid, with x' the per-interval polyline slope.
    Refinements resample the polyline (exact interpolation), so the gap
    isolates quadrature error; observed orders are log2 gap ratios.
    A path whose slope jumps are large relative to the slope scale is
    rejected as non-smooth.
    """
    grid = x.grid
    k0, k1 = grid.node_index(t0), grid.node_index(t1)
    if k1 <= k0:
        raise DomainError("need t1 > t0 on the grid")
    _check_smooth_segment(x, k0, k1, smoothness_bound)

    levels = []
    gaps = []
    current = x
    c0, c1 = k0, k1
    for _ in range(refinements + 1):
        phi, dphi_dt, dphi_dx = _functional_profile(functional, current, params, companion)
        nodes = current.grid.nodes
        lhs = phi[c1] - phi[c0]
        dt = np.diff(nodes[c0:c1 + 1])
        slopes = np.diff(current.values[c0:c1 + 1], axis=0) / dt[:, None]
        flux = np.einsum("kd,kd->k", slopes,
                         0.5 * (dphi_dx[c0:c1] + dphi_dx[c0 + 1:c1 + 1]))
        rhs = float(np.sum(dt * (0.5 * (dphi_dt[c0:c1] + dphi_dt[c0 + 1:c1 + 1]) + flux)))
        gap = abs(lhs - rhs)
        levels.append((current.grid.n_steps, float(lhs), rhs, gap))
        gaps.append(gap)
        current = current.resample(current.grid.refine(2))
        c0, c1 = 2 * c0, 2 * c1

    floor = 1e-13 * (1.0 + abs(levels[0][1]))
    exact = all(g <= floor for g in gaps)
    orders = []
    for g_a, g_b in zip(gaps[:-1], gaps[1:]):
        if g_a > floor and g_b > floor:
            orders.append(math.log2(g_a / g_b))
    estimate = float(np.median(orders)) if orders else float("inf")
    return ChainRuleReport(functional=functional, t0=t0, t1=t1, levels=tuple(levels),
                           observed_orders=tuple(orders), order_estimate=estimate,
                           kink_count=_count_kinks(x, k0, k1), exact=exact)


def _count_kinks(x: Path, k0: int, k1: int) -> int:
    """Regime switches of the running sup (attaining <-> frozen) strictly inside the window.

    A switch right at the window start is not a kink: the integrand is smooth
    from t0 on when the regime settles immediately.
    """
    cur_sq = np.sum(x.values[k0:k1 + 1] ** 2, axis=1)
    sup_sq = np.maximum.accumulate(cur_sq)
    attaining = cur_sq >= sup_sq * (1.0 - 1e-9)
    switches = attaining[1:] != attaining[:-1]
    return int(np.sum(switches[1:]))


def non_anticipativity_gap(t: float, x: Path) -> float:
    """|surrogate(t, x) - surrogate(t, stopped x)| -- zero by construction."""
    return abs(upsilon(t, x).value - upsilon(t, stop_path(x, t)).value)


def property_battery(samples: int = 500, seed: int = 0) -> dict:
    """Run the full surrogate/penalty property battery; one record per property.

    Checks the sandwich bounds, the theta range, the gradient bound, the zero
    time derivative, non-anticipativity, and chain-rule refinement orders on
    representative smooth paths.
    """
    from .pathcore import TimeGrid, sup_norm

    rng = np.random.default_rng(seed)
    kappa = kappa_constant()
    checks = []

    worst_low, worst_high = np.inf, -np.inf
    theta_min, theta_max = np.inf, -np.inf
    grad_excess = -np.inf
    dt_nonzero = 0
    na_gap = 0.0
    for _ in range(samples):
        n = int(rng.integers(4, 20))
        grid = TimeGrid(0.0, 1.0, n)
        dim = int(rng.integers(1, 4))
        x = Path(grid, rng.standard_normal((n + 1, dim)))
        y = Path(grid, rng.standard_normal((n + 1, dim)))
        t = rng.uniform(0.0, 1.0)
        pe = penalty_psi(t, x, y)
        s2 = sup_norm(x - y, t) ** 2
        if s2 > 0:
            worst_low = min(worst_low, pe.value - kappa * s2)
            worst_high = max(worst_high, pe.value - 3.0 * s2)
        theta_min = min(theta_min, pe.theta)
        theta_max = max(theta_max, pe.theta)
        ev = upsilon(t, x)
        bound = 4.0 * float(np.linalg.norm(x.value_at(t)))
        grad_excess = max(grad_excess, float(np.linalg.norm(ev.dx)) - bound * (1.0 + 1e-12))
        dt_nonzero += ev.dt != 0.0
        na_gap = max(na_gap, non_anticipativity_gap(t, x))

    checks.append({"name": "sandwich-lower", "value": float(worst_low),
                   "passed": worst_low >= -1e-10})
    checks.append({"name": "sandwich-upper", "value": float(worst_high),
                   "passed": worst_high <= 1e-10})
    checks.append({"name": "theta-range", "value": [float(theta_min), float(theta_max)],
                   "passed": 0.0 <= theta_min and theta_max <= 4.0})
    checks.append({"name": "gradient-bound", "value": float(grad_excess),
                   "passed": grad_excess <= 0.0})
    checks.append({"name": "dt-zero", "value": int(dt_nonzero), "passed": dt_nonzero == 0})
    checks.append({"name": "non-anticipativity", "value": float(na_gap),
                   "passed": na_gap <= 1e-12})

    grid = TimeGrid(0.0, 1.0, 16)
    falling = Path(grid, 2.0 - grid.nodes)
    peaked = Path(grid, 1.0 + 4.0 * grid.nodes * (1.0 - grid.nodes))
    params = LyapunovParams.at_epsilon0(lambda_L=0.5, horizon=1.0)
    for name, path, functional, kwargs, floor in (
            ("chain-rule-smooth", falling, "upsilon", {}, 1.9),
            ("chain-rule-kink", peaked, "upsilon", {}, 0.9),
            ("chain-rule-nu", falling, "nu", {"params": params}, 1.9)):
        rep = verify_chain_rule(functional, path, 0.0, 1.0, refinements=3, **kwargs)
        checks.append({"name": name,
                       "value": rep.order_estimate if not rep.exact else "exact",
                       "passed": rep.exact or rep.order_estimate >= floor})
    return {"samples": samples, "seed": seed, "checks": checks,
            "passed": all(c["passed"] for c in checks)}
