"""Monotone coercive operators and the time-delay evolution solver.

Solves x'(t) + A(t, x(t)) = f(t) step by step with implicit (backward) Euler:
each step is a strongly monotone root-finding problem handled by damped Newton
with a safeguarded fallback.  Trajectories with forcing bounded by
L * (1 + sup-norm of the stopped path) form the discrete reachable tube.
"""

from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np

from .errors import AuditError, ContractError, DomainError, SolverError
from .pathcore import Path, StateSpace, sup_norm

NEWTON_MAX_ITER = 50
STEP_TOL = 1e-10
FORCING_BOUND_TOL = 1e-9
FORCING_ALGORITHM = "ball-uniform-pcg64/v1"


@dataclass(frozen=True, eq=False)
class OperatorSpec:
    """A monotone coercive operator A(t, .) with declared constants.

    eval_fn maps (t, v) -> V*-vector (as an H-array through the Euclidean
    pairing).  Declared constants feed the hypothesis audit:
    boundedness  ||A(t,x)||_* <= a1_bound + c1 ||x||^(p-1),
    coercivity   <A(t,x), x>  >= c2 ||x||^p.
    eval_fn must be reentrant (no hidden mutable state).
    """

    space: StateSpace
    eval_fn: object
    c1: float
    c2: float
    a1_bound: float = 0.0
    kind: str = "custom"

    def __post_init__(self):
        if self.c1 < 0 or self.a1_bound < 0:
            raise DomainError("c1 and a1_bound must be >= 0")
        if not self.c2 > 0:
            raise DomainError("c2 must be > 0")

    def __call__(self, t: float, v) -> np.ndarray:
        out = np.atleast_1d(np.asarray(self.eval_fn(t, np.atleast_1d(v)), dtype=float))
        if out.shape != (self.space.dim,):
            raise DomainError(f"operator returned shape {out.shape}, expected ({self.space.dim},)")
        return out


def make_linear_operator(dim: int = 1, gain: float = 1.0) -> OperatorSpec:
    """A(t, x) = gain * x with p = 2; coercive with c2 = gain for gain > 0."""
    space = StateSpace(dim=dim, p_exp=2.0)
    return OperatorSpec(
        space=space,
        eval_fn=lambda t, v: gain * v,
        c1=abs(gain),
        c2=gain if gain > 0 else 1e-30,
        a1_bound=0.0,
        kind="linear",
    )


def build_p_laplacian(nodes: int, p_exp: float, audit_samples: int = 200, seed: int = 0) -> OperatorSpec:
    """1-D discrete p-Laplacian on (0, 1) with homogeneous Dirichlet boundary.

    Interior nodes only; A(x)_i = -D(|Dx|^(p-2) Dx)_i by central flux
    differencing.  The coercivity constant c2 is estimated by a seeded audit
    (half the minimum observed ratio, so later audits clear it) and the
    boundedness constant c1 by the maximum observed ratio with a 2x margin.
    """
    if nodes < 2:
        raise DomainError("need at least 2 interior nodes")
    if p_exp < 2.0:
        raise DomainError("p exponent must be >= 2")
    h = 1.0 / (nodes + 1)
    space = StateSpace(dim=nodes, p_exp=float(p_exp))

    def eval_fn(t, v):
        padded = np.concatenate(([0.0], v, [0.0]))
        d = np.diff(padded) / h
        flux = np.abs(d) ** (p_exp - 2.0) * d
        return -np.diff(flux) / h

    probe = OperatorSpec(space=space, eval_fn=eval_fn, c1=1.0, c2=1e-30,
                         a1_bound=0.0, kind="p-laplacian-1d")
    rng = np.random.default_rng(seed)
    coercivity, boundedness = [], []
    for _ in range(audit_samples):
        x = rng.standard_normal(nodes) * rng.choice([0.1, 1.0, 3.0])
        ax = probe(0.0, x)
        nv = space.norm_v(x)
        if nv > 0:
            coercivity.append(float(np.dot(ax, x)) / nv ** p_exp)
            boundedness.append(space.dual_norm(ax) / nv ** (p_exp - 1.0))
    c2_est = 0.5 * min(coercivity)
    if not c2_est > 0:
        raise AuditError("p-Laplacian calibration found a non-coercive sample")
    return OperatorSpec(space=space, eval_fn=eval_fn, c1=2.0 * max(boundedness),
                        c2=c2_est, a1_bound=0.0, kind="p-laplacian-1d")


@dataclass(frozen=True)
class AuditReport:
    """Observed hypothesis extremes for an operator over seeded random samples."""

    samples: int
    seed: int
    monotonicity_min: float
    coercivity_min: float
    boundedness_max: float
    violations: tuple

    @property
    def passed(self) -> bool:
        return not self.violations

    def to_json_obj(self) -> dict:
        return {
            "samples": self.samples,
            "seed": self.seed,
            "monotonicity_min": self.monotonicity_min,
            "coercivity_min": self.coercivity_min,
            "boundedness_max": self.boundedness_max,
            "violations": list(self.violations),
            "passed": self.passed,
        }


def audit_hypotheses(op: OperatorSpec, samples: int, seed: int,
                     monotonicity_tol: float = 1e-12) -> AuditReport:
    """Sample-based audit of monotonicity, coercivity, and boundedness.

    Reports the minimum monotonicity pairing <A(t,x)-A(t,y), x-y>, the minimum
    coercivity ratio <A(t,x), x> / ||x||^p, and the maximum boundedness ratio
    against the declared constants; any violation is flagged.
    """
    if samples < 1:
        raise DomainError("samples must be >= 1")
    rng = np.random.default_rng(seed)
    dim, p = op.space.dim, op.space.p_exp
    mono_min, coer_min, bound_max = np.inf, np.inf, 0.0
    for i in range(samples):
        t = rng.uniform(0.0, 1.0)
        scale = rng.choice([0.05, 0.5, 1.0, 5.0])
        x = rng.standard_normal(dim) * scale
        y = rng.standard_normal(dim) * scale
        ax, ay = op(t, x), op(t, y)
        if not (np.all(np.isfinite(ax)) and np.all(np.isfinite(ay))):
            raise AuditError("non-finite operator output", sample={"t": t, "x": x, "y": y})
        mono_min = min(mono_min, float(np.dot(ax - ay, x - y)))
        nv = op.space.norm_v(x)
        if nv > 1e-12:
            coer_min = min(coer_min, float(np.dot(ax, x)) / nv ** p)
            denom = op.a1_bound + op.c1 * nv ** (p - 1.0)
            if denom > 0:
                bound_max = max(bound_max, op.space.dual_norm(ax) / denom)
    violations = []
    if mono_min < -monotonicity_tol:
        violations.append(f"monotonicity pairing {mono_min:.3e} < -{monotonicity_tol:g}")
    if coer_min < op.c2 - 1e-12:
        violations.append(f"coercivity ratio {coer_min:.3e} below declared c2 {op.c2:.3e}")
    if bound_max > 1.0 + 1e-9:
        violations.append(f"boundedness ratio {bound_max:.3e} exceeds declared envelope")
    return AuditReport(samples=samples, seed=seed, monotonicity_min=float(mono_min),
                       coercivity_min=float(coer_min), boundedness_max=float(bound_max),
                       violations=tuple(violations))


@dataclass(frozen=True, eq=False)
class DelayDynamics:
    """Right-hand side f(t, stopped path, control) for x' + A(t, x) = f.

    The control slot carries either a game control pair or an explicit forcing
    vector, depending on `rhs`.  lipschitz_L is the L of the reachable-tube
    bound |f| <= L (1 + sup-norm of the stopped path).
    """

    op: OperatorSpec
    rhs: object
    lipschitz_L: float

    def __post_init__(self):
        if self.lipschitz_L < 0:
            raise DomainError("lipschitz_L must be >= 0")

    @classmethod
    def forced(cls, op: OperatorSpec, lipschitz_L: float) -> "DelayDynamics":
        """Dynamics whose control slot IS the forcing vector."""
        return cls(op=op, rhs=lambda t, x, u: np.atleast_1d(np.asarray(u, dtype=float)),
                   lipschitz_L=lipschitz_L)


@dataclass(frozen=True, eq=False)
class SolveReport:
    """One delay-evolution solve: path, applied forcing, and solver diagnostics."""

    path: Path
    forcing_trace: np.ndarray
    start_index: int
    step_count: int
    residual_estimate: float
    newton_total: int
    newton_max: int
    forcing_algorithm: str = None

    def to_json_obj(self) -> dict:
        return {
            "path": self.path.to_json_obj(),
            "forcing_trace": [[float(v) for v in row] for row in np.atleast_2d(self.forcing_trace)],
            "start_index": self.start_index,
            "step_count": self.step_count,
            "residual_estimate": self.residual_estimate,
            "newton_total": self.newton_total,
            "newton_max": self.newton_max,
            "forcing_algorithm": self.forcing_algorithm,
        }


def _implicit_step(op: OperatorSpec, t_next: float, dt: float, target: np.ndarray,
                   guess: np.ndarray, tol: float, step_index: int):
    """Solve g(xi) = xi + dt*A(t_next, xi) - target = 0; returns (xi, iterations, |g|)."""

    def g(xi):
        return xi + dt * op(t_next, xi) - target

    dim = len(target)
    xi = guess.astype(float).copy()
    gx = g(xi)
    iters = 0
    for _ in range(NEWTON_MAX_ITER):
        res = float(np.linalg.norm(gx))
        if res <= tol:
            return xi, iters, res
        iters += 1
        jac = np.eye(dim)
        fd = 1e-7 * (1.0 + float(np.linalg.norm(xi)))
        for j in range(dim):
            e = np.zeros(dim)
            e[j] = fd
            jac[:, j] = (g(xi + e) - gx) / fd
        try:
            step = np.linalg.solve(jac, -gx)
        except np.linalg.LinAlgError:
            break
        lam = 1.0
        while lam >= 1e-6:
            trial = xi + lam * step
            gt = g(trial)
            if np.linalg.norm(gt) <= (1.0 - 0.25 * lam) * res:
                xi, gx = trial, gt
                break
            lam *= 0.5
        else:
            break
    # damped Newton stalled; safeguarded fallback
    if dim == 1:
        return _bisect_step(g, target, tol, step_index, iters)
    xi = guess.astype(float).copy()
    tau = 0.5
    for _ in range(4000):
        gx = g(xi)
        res = float(np.linalg.norm(gx))
        if res <= tol:
            return xi, iters, res
        trial = xi - tau * gx
        if np.linalg.norm(g(trial)) < res:
            xi = trial
        else:
            tau *= 0.5
            if tau < 1e-12:
                break
    raise SolverError(f"implicit step failed to converge at step {step_index}", step_index)


def _bisect_step(g, target, tol, step_index, iters):
    # g is scalar and strictly increasing (identity plus dt * monotone A)
    lo = hi = float(target[0])
    width = 1.0 + abs(lo)
    for _ in range(200):
        if g(np.array([lo]))[0] <= 0.0:
            break
        lo -= width
        width *= 2.0
    width = 1.0 + abs(hi)
    for _ in range(200):
        if g(np.array([hi]))[0] >= 0.0:
            break
        hi += width
        width *= 2.0
    for _ in range(200):
        mid = 0.5 * (lo + hi)
        val = g(np.array([mid]))[0]
        if abs(val) <= tol:
            return np.array([mid]), iters, abs(val)
        if val > 0:
            hi = mid
        else:
            lo = mid
    raise SolverError(f"bisection failed to converge at step {step_index}", step_index)


def solve_delay_evolution(dyn: DelayDynamics, t0: float, x0: Path, forcing=None,
                          forcing_algorithm: str = None) -> SolveReport:
    """Extend the history x0 past t0 by implicit Euler on x' + A(t, x) = f.

    x0 must live on the full solver grid with t0 at a grid node; node values at
    times <= t0 are kept verbatim.  `forcing` supplies the control per step:
    None (zero vector), a sequence indexed by grid interval, or a callable
    (t_k, stopped path) -> control evaluated at the step's left endpoint.
    The applied forcing must respect |f| <= L (1 + sup-norm); violations raise
    ContractError.
    """
    grid = x0.grid
    k0 = grid.node_index(t0)
    nodes = grid.nodes
    n = grid.n_steps
    dim = x0.dim
    L = dyn.lipschitz_L

    values = x0.values.copy()
    trace = np.zeros((n - k0, dim))
    newton_total, newton_max, worst_res = 0, 0, 0.0

    for k in range(k0, n):
        t_k, t_k1 = nodes[k], nodes[k + 1]
        dt = t_k1 - t_k
        # stopped path at t_k: history so far, frozen forward
        held = values.copy()
        held[k + 1:] = held[k]
        x_stop = Path(grid, held)
        if forcing is None:
            control = np.zeros(dim)
        elif callable(forcing):
            control = forcing(t_k, x_stop)
        else:
            control = forcing[k]
        f_k = np.atleast_1d(np.asarray(dyn.rhs(t_k, x_stop, control), dtype=float))
        bound = L * (1.0 + sup_norm(x_stop, t_k))
        fmag = float(np.linalg.norm(f_k))
        if fmag > bound + FORCING_BOUND_TOL * (1.0 + bound):
            raise ContractError(
                f"forcing magnitude {fmag:.6e} exceeds L(1+sup) = {bound:.6e} at step {k}")
        target = values[k] + dt * f_k
        tol = STEP_TOL * (1.0 + float(np.linalg.norm(values[k])))
        xi, iters, res = _implicit_step(dyn.op, t_k1, dt, target, values[k], tol, k)
        values[k + 1] = xi
        trace[k - k0] = f_k
        newton_total += iters
        newton_max = max(newton_max, iters)
        worst_res = max(worst_res, res)

    return SolveReport(path=Path(grid, values), forcing_trace=trace, start_index=k0,
                       step_count=n - k0, residual_estimate=worst_res,
                       newton_total=newton_total, newton_max=newton_max,
                       forcing_algorithm=forcing_algorithm)


def _ball_point(rng, dim: int, radius: float) -> np.ndarray:
    if radius <= 0.0:
        return np.zeros(dim)
    direction = rng.standard_normal(dim)
    norm = np.linalg.norm(direction)
    if norm == 0.0:
        return np.zeros(dim)
    return direction / norm * radius * rng.uniform() ** (1.0 / dim)


def sample_reachable_set(dyn: DelayDynamics, t0: float, x0: Path, count: int,
                         seed: int, jobs: int = 1) -> list:
    """`count` solves under randomized admissible forcings, deterministic per seed.

    Each sample draws its forcing piecewise-constant, uniformly in the ball of
    radius L (1 + sup-norm of the stopped path) at every step, from its own
    PRNG stream derived from (seed, sample index).
    """
    if count < 1:
        raise DomainError("count must be >= 1")
    identity = DelayDynamics.forced(dyn.op, dyn.lipschitz_L)

    def one(i: int) -> SolveReport:
        rng = np.random.default_rng([seed, i])

        def draw(t_k, x_stop):
            radius = dyn.lipschitz_L * (1.0 + sup_norm(x_stop, t_k))
            return _ball_point(rng, x0.dim, radius)

        return solve_delay_evolution(identity, t0, x0, forcing=draw,
                                     forcing_algorithm=FORCING_ALGORITHM)

    if jobs > 1:
        with ThreadPoolExecutor(max_workers=jobs) as pool:
            return list(pool.map(one, range(count)))
    return [one(i) for i in range(count)]
