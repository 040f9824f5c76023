"""Zero-sum differential games over finite control grids.

Holds the game specification (dynamics, running and terminal costs, control
grids), the lower/upper Hamiltonians by exact enumeration, a brute-force
backward dynamic-programming value oracle on a state lattice, the constructive
measurable selection rule, and the extremal-shift feedback strategy driven by
the decaying Lyapunov function.

The DP oracle treats lattice states as constant-history paths; its values are
exact for games whose path dependence collapses to the current state, which is
the regime of every desk-scale example here.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from .errors import (
    ConfigurationError,
    DomainError,
    EvaluationError,
    LatticeCoverageError,
)
from .evolution import DelayDynamics, _implicit_step, make_linear_operator, \
    sample_reachable_set
from .pathcore import Path, TimeGrid, sup_norm
from .upsilon import LyapunovParams

STEP_SOLVE_TOL = 1e-11


# ---------------------------------------------------------------------------
# specification
# ---------------------------------------------------------------------------

@dataclass(frozen=True, eq=False)
class ControlGrid:
    """Finite ordered control sets; index 0 first is the tie-breaking authority."""

    p_points: tuple
    q_points: tuple

    def __post_init__(self):
        if not self.p_points or not self.q_points:
            raise DomainError("control grids must be nonempty")
        object.__setattr__(self, "p_points", tuple(self.p_points))
        object.__setattr__(self, "q_points", tuple(self.q_points))

    @property
    def n_p(self) -> int:
        return len(self.p_points)

    @property
    def n_q(self) -> int:
        return len(self.q_points)

    def describe(self) -> str:
        return f"P={list(self.p_points)!r} Q={list(self.q_points)!r}"


@dataclass(frozen=True, eq=False)
class GameSpec:
    """Dynamics f, running cost, terminal cost, and control grids of one game.

    dyn.rhs is called as rhs(t, stopped path, (p, q)).  l_f is the growth
    constant of |f| <= l_f (1 + sup-norm); lambda_L the Lipschitz constant of
    (f, running cost) in the path sup-norm over the reachable tube.
    """

    dyn: DelayDynamics
    running_cost: object
    terminal_cost: object
    controls: ControlGrid
    l_f: float
    lambda_L: float
    name: str = "game"

    def drift(self, t: float, x: Path, p, q) -> np.ndarray:
        out = np.atleast_1d(np.asarray(self.dyn.rhs(t, x, (p, q)), dtype=float))
        if not np.all(np.isfinite(out)):
            raise EvaluationError(f"non-finite drift at t={t}, p={p!r}, q={q!r}")
        return out

    def stage_cost(self, t: float, x: Path, p, q) -> float:
        val = float(self.running_cost(t, x, p, q))
        if not np.isfinite(val):
            raise EvaluationError(f"non-finite running cost at t={t}, p={p!r}, q={q!r}")
        return val

    def final_cost(self, x: Path) -> float:
        val = float(self.terminal_cost(x))
        if not np.isfinite(val):
            raise EvaluationError("non-finite terminal cost")
        return val

    def stage_matrix(self, t: float, x: Path, z) -> np.ndarray:
        """M[i, j] = cost(p_i, q_j) + (f(p_i, q_j), z) over the full control grid."""
        z = np.atleast_1d(np.asarray(z, dtype=float))
        M = np.empty((self.controls.n_p, self.controls.n_q))
        for i, p in enumerate(self.controls.p_points):
            for j, q in enumerate(self.controls.q_points):
                M[i, j] = self.stage_cost(t, x, p, q) + float(self.drift(t, x, p, q) @ z)
        return M

    def audit(self, samples: int, seed: int) -> dict:
        """Check |f| <= l_f (1 + sup) and finiteness of costs on random inputs."""
        rng = np.random.default_rng(seed)
        dim = self.dyn.op.space.dim
        worst = 0.0
        for _ in range(samples):
            n = int(rng.integers(4, 12))
            grid = TimeGrid(0.0, 1.0, n)
            x = Path(grid, rng.standard_normal((n + 1, dim)) * rng.choice([0.3, 1.0, 3.0]))
            t = float(rng.choice(grid.nodes))
            p = self.controls.p_points[rng.integers(self.controls.n_p)]
            q = self.controls.q_points[rng.integers(self.controls.n_q)]
            f = self.drift(t, x, p, q)
            self.stage_cost(t, x, p, q)
            self.final_cost(x)
            worst = max(worst, float(np.linalg.norm(f)) / (self.l_f * (1.0 + sup_norm(x, t)) + 1e-300))
        return {"samples": samples, "seed": seed, "max_growth_ratio": worst,
                "passed": worst <= 1.0 + 1e-9}


# ---------------------------------------------------------------------------
# Hamiltonians
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class HamiltonianEval:
    """Lower/upper Hamiltonians at one (t, x, z) with argmin/argmax records."""

    f_minus: float
    f_plus: float
    minus_q_index: int
    minus_p_index: int
    plus_p_index: int
    plus_q_index: int

    @property
    def isaacs_gap(self) -> float:
        return self.f_plus - self.f_minus


def hamiltonian(spec: GameSpec, t: float, x: Path, z) -> HamiltonianEval:
    """Exact enumeration of max_q min_p and min_p max_q of cost + (f, z).

    Ties break to the smallest index.
    """
    M = spec.stage_matrix(t, x, z)
    col_mins = M.min(axis=0)
    jq = int(np.argmax(col_mins))
    ip_minus = int(np.argmin(M[:, jq]))
    row_maxes = M.max(axis=1)
    ip = int(np.argmin(row_maxes))
    jq_plus = int(np.argmax(M[ip, :]))
    return HamiltonianEval(
        f_minus=float(col_mins[jq]), f_plus=float(row_maxes[ip]),
        minus_q_index=jq, minus_p_index=ip_minus,
        plus_p_index=ip, plus_q_index=jq_plus)


@dataclass(frozen=True)
class LipschitzReport:
    samples: int
    seed: int
    max_ratio: float
    bound: float
    flagged: bool


def audit_hamiltonian_lipschitz(spec: GameSpec, samples: int, seed: int) -> LipschitzReport:
    """Max of |F(z1) - F(z2)| / ((1 + sup)|z1 - z2|) over both Hamiltonians."""
    if samples < 1:
        raise DomainError("samples must be >= 1")
    rng = np.random.default_rng(seed)
    dim = spec.dyn.op.space.dim
    worst = 0.0
    for _ in range(samples):
        n = int(rng.integers(4, 10))
        grid = TimeGrid(0.0, 1.0, n)
        x = Path(grid, rng.standard_normal((n + 1, dim)) * rng.choice([0.3, 1.0, 2.0]))
        t = float(rng.choice(grid.nodes))
        z1 = rng.standard_normal(dim) * rng.choice([0.5, 2.0])
        z2 = rng.standard_normal(dim) * rng.choice([0.5, 2.0])
        dz = float(np.linalg.norm(z1 - z2))
        if dz < 1e-12:
            continue
        h1 = hamiltonian(spec, t, x, z1)
        h2 = hamiltonian(spec, t, x, z2)
        scale = (1.0 + sup_norm(x, t)) * dz
        worst = max(worst,
                    abs(h1.f_minus - h2.f_minus) / scale,
                    abs(h1.f_plus - h2.f_plus) / scale)
    return LipschitzReport(samples=samples, seed=seed, max_ratio=worst, bound=spec.l_f,
                           flagged=worst > spec.l_f + 1e-9)


# ---------------------------------------------------------------------------
# state lattice and value tables
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class StateLattice:
    """Uniform rectangular lattice in 1 or 2 state dimensions (oracle scale)."""

    lo: tuple
    hi: tuple
    shape: tuple

    def __post_init__(self):
        lo = tuple(float(v) for v in np.atleast_1d(self.lo))
        hi = tuple(float(v) for v in np.atleast_1d(self.hi))
        shape = tuple(int(v) for v in np.atleast_1d(self.shape))
        if not (len(lo) == len(hi) == len(shape)):
            raise DomainError("lo, hi, shape must have matching lengths")
        if len(lo) > 2:
            raise DomainError("value lattice supports state dimension <= 2 (oracle only)")
        if any(h <= l for l, h in zip(lo, hi)) or any(s < 2 for s in shape):
            raise DomainError("need hi > lo and at least 2 points per dimension")
        object.__setattr__(self, "lo", lo)
        object.__setattr__(self, "hi", hi)
        object.__setattr__(self, "shape", shape)

    @property
    def dim(self) -> int:
        return len(self.shape)

    @property
    def axes(self) -> list:
        return [np.linspace(l, h, s) for l, h, s in zip(self.lo, self.hi, self.shape)]

    @property
    def spacing(self) -> tuple:
        return tuple((h - l) / (s - 1) for l, h, s in zip(self.lo, self.hi, self.shape))

    def points(self) -> np.ndarray:
        """All lattice points, C-ordered, shape (n_points, dim)."""
        mesh = np.meshgrid(*self.axes, indexing="ij")
        return np.stack([m.ravel() for m in mesh], axis=1)

    def interpolate_batch(self, values: np.ndarray, states: np.ndarray) -> np.ndarray:
        """Multilinear interpolation of a lattice field at many states.

        Out-of-lattice states raise LatticeCoverageError with the margin needed
        (silent clamping would corrupt value comparisons).
        """
        states = np.atleast_2d(np.asarray(states, dtype=float))
        over = np.maximum(states - np.asarray(self.hi), 0.0)
        under = np.maximum(np.asarray(self.lo) - states, 0.0)
        worst = float(np.max(over + under))
        if worst > 1e-9:
            raise LatticeCoverageError(
                f"state leaves the lattice by {worst:.6e}; expand bounds by at least that margin",
                margin=worst)
        out = np.zeros(len(states))
        idx = []
        wts = []
        for d in range(self.dim):
            axis = self.axes[d]
            pos = np.clip((states[:, d] - axis[0]) / (axis[1] - axis[0]), 0.0, self.shape[d] - 1)
            base = np.minimum(pos.astype(int), self.shape[d] - 2)
            idx.append(base)
            wts.append(pos - base)
        if self.dim == 1:
            b, w = idx[0], wts[0]
            out = values[b] * (1.0 - w) + values[b + 1] * w
        else:
            b0, w0 = idx[0], wts[0]
            b1, w1 = idx[1], wts[1]
            out = (values[b0, b1] * (1.0 - w0) * (1.0 - w1)
                   + values[b0 + 1, b1] * w0 * (1.0 - w1)
                   + values[b0, b1 + 1] * (1.0 - w0) * w1
                   + values[b0 + 1, b1 + 1] * w0 * w1)
        return out

    def interpolate(self, values: np.ndarray, state) -> float:
        return float(self.interpolate_batch(values, np.atleast_1d(state)[None, :])[0])


@dataclass(frozen=True, eq=False)
class ValueTable:
    """Lower/upper game values on (time nodes) x (state lattice)."""

    grid: TimeGrid
    lattice: StateLattice
    v_minus: np.ndarray
    v_plus: np.ndarray
    metadata: dict = field(default_factory=dict)

    def side_values(self, side: str) -> np.ndarray:
        if side in ("upper", "plus"):
            if self.v_plus is None:
                raise ConfigurationError("table holds no upper values")
            return self.v_plus
        if side in ("lower", "minus"):
            if self.v_minus is None:
                raise ConfigurationError("table holds no lower values")
            return self.v_minus
        raise DomainError(f"unknown side {side!r}")

    def interp(self, side: str, t: float, state) -> float:
        """Time-linear, state-multilinear interpolation; exact at table nodes."""
        vals = self.side_values(side)
        nodes = self.grid.nodes
        self.grid.require_contains(t)
        k = int(np.argmin(np.abs(nodes - t)))
        if abs(nodes[k] - t) <= 1e-9 * max(1.0, abs(self.grid.t_end)):
            return self.lattice.interpolate(vals[k], state)
        k = int(np.searchsorted(nodes, t, side="right")) - 1
        k = min(max(k, 0), len(nodes) - 2)
        w = (t - nodes[k]) / (nodes[k + 1] - nodes[k])
        a = self.lattice.interpolate(vals[k], state)
        b = self.lattice.interpolate(vals[k + 1], state)
        return a + w * (b - a)

    def interp_batch(self, side: str, t: float, states: np.ndarray) -> np.ndarray:
        vals = self.side_values(side)
        nodes = self.grid.nodes
        k = int(np.argmin(np.abs(nodes - t)))
        if abs(nodes[k] - t) <= 1e-9 * max(1.0, abs(self.grid.t_end)):
            return self.lattice.interpolate_batch(vals[k], states)
        k = int(np.searchsorted(nodes, t, side="right")) - 1
        k = min(max(k, 0), len(nodes) - 2)
        w = (t - nodes[k]) / (nodes[k + 1] - nodes[k])
        a = self.lattice.interpolate_batch(vals[k], states)
        b = self.lattice.interpolate_batch(vals[k + 1], states)
        return a + w * (b - a)

    def gradient(self, side: str, t: float, state) -> np.ndarray:
        """Central-difference lattice gradient of the value at (t, state)."""
        state = np.atleast_1d(np.asarray(state, dtype=float))
        g = np.zeros(self.lattice.dim)
        for d in range(self.lattice.dim):
            h = self.lattice.spacing[d]
            up = state.copy()
            dn = state.copy()
            up[d] = min(up[d] + h, self.lattice.hi[d])
            dn[d] = max(dn[d] - h, self.lattice.lo[d])
            if up[d] - dn[d] < 1e-300:
                continue
            g[d] = (self.interp(side, t, up) - self.interp(side, t, dn)) / (up[d] - dn[d])
        return g

    def to_json_obj(self) -> dict:
        obj = {
            "t": [float(v) for v in self.grid.nodes],
            "lattice": {"lo": list(self.lattice.lo), "hi": list(self.lattice.hi),
                        "shape": list(self.lattice.shape)},
            "metadata": dict(self.metadata),
        }
        if self.v_minus is not None:
            obj["v_minus"] = self.v_minus.tolist()
        if self.v_plus is not None:
            obj["v_plus"] = self.v_plus.tolist()
        return obj

    def to_csv(self) -> str:
        """Long-form rows: t, state coordinates, v_minus, v_plus."""
        lines = ["t," + ",".join(f"s_{d + 1}" for d in range(self.lattice.dim))
                 + ",v_minus,v_plus"]
        points = self.lattice.points()
        for k, t in enumerate(self.grid.nodes):
            vm = self.v_minus[k].ravel() if self.v_minus is not None else np.full(len(points), np.nan)
            vp = self.v_plus[k].ravel() if self.v_plus is not None else np.full(len(points), np.nan)
            for point, a, b in zip(points, vm, vp):
                coords = ",".join(f"{c:.17g}" for c in point)
                lines.append(f"{t:.17g},{coords},{a:.17g},{b:.17g}")
        return "\n".join(lines) + "\n"


def _lift_paths(lattice: StateLattice, grid: TimeGrid) -> list:
    return [Path.constant(grid, point) for point in lattice.points()]


def _dp_slice(spec: GameSpec, grid: TimeGrid, lattice: StateLattice, k: int,
              v_minus_next, v_plus_next, lifts):
    """One backward step: returns (v_minus_k, v_plus_k) lattice arrays."""
    nodes = grid.nodes
    t_k, t_k1 = nodes[k], nodes[k + 1]
    dt = t_k1 - t_k
    n_p, n_q = spec.controls.n_p, spec.controls.n_q
    points = lattice.points()
    out_minus = np.empty(len(points)) if v_minus_next is not None else None
    out_plus = np.empty(len(points)) if v_plus_next is not None else None
    op = spec.dyn.op
    for idx, (point, lift) in enumerate(zip(points, lifts)):
        obj_minus = np.empty((n_p, n_q)) if out_minus is not None else None
        obj_plus = np.empty((n_p, n_q)) if out_plus is not None else None
        for i, p in enumerate(spec.controls.p_points):
            for j, q in enumerate(spec.controls.q_points):
                f = spec.drift(t_k, lift, p, q)
                target = point + dt * f
                tol = STEP_SOLVE_TOL * (1.0 + float(np.linalg.norm(point)))
                succ, _, _ = _implicit_step(op, t_k1, dt, target, point, tol, k)
                stage = dt * spec.stage_cost(t_k, lift, p, q)
                try:
                    if obj_minus is not None:
                        obj_minus[i, j] = stage + lattice.interpolate(v_minus_next, succ)
                    if obj_plus is not None:
                        obj_plus[i, j] = stage + lattice.interpolate(v_plus_next, succ)
                except LatticeCoverageError as err:
                    raise LatticeCoverageError(
                        f"successor left the lattice at time index {k} "
                        f"(state {point}, p={p!r}, q={q!r}): {err}", margin=err.margin)
        if out_minus is not None:
            out_minus[idx] = np.max(np.min(obj_minus, axis=0))
        if out_plus is not None:
            out_plus[idx] = np.min(np.max(obj_plus, axis=1))
    shape = lattice.shape
    return (out_minus.reshape(shape) if out_minus is not None else None,
            out_plus.reshape(shape) if out_plus is not None else None)


def dp_value(spec: GameSpec, grid: TimeGrid, lattice: StateLattice,
             side: str = "both") -> ValueTable:
    """Backward min-max recursion on the lattice.

    Upper value: minimizer commits first each step (min over p of max over q);
    lower value: maximizer commits first (max over q of min over p).  Terminal
    slice is the terminal cost evaluated exactly at lattice points.  Successors
    are one implicit-Euler step; leaving the lattice is an error that names the
    margin needed.
    """
    if side not in ("both", "lower", "upper"):
        raise DomainError(f"unknown side {side!r}")
    want_minus = side in ("both", "lower")
    want_plus = side in ("both", "upper")
    lifts = _lift_paths(lattice, grid)
    n_nodes = grid.n_steps + 1
    shape = (n_nodes,) + lattice.shape
    terminal = np.array([spec.final_cost(lift) for lift in lifts]).reshape(lattice.shape)
    v_minus = np.empty(shape) if want_minus else None
    v_plus = np.empty(shape) if want_plus else None
    if want_minus:
        v_minus[-1] = terminal
    if want_plus:
        v_plus[-1] = terminal
    for k in range(grid.n_steps - 1, -1, -1):
        m_next = v_minus[k + 1] if want_minus else None
        p_next = v_plus[k + 1] if want_plus else None
        m_k, p_k = _dp_slice(spec, grid, lattice, k, m_next, p_next, lifts)
        if want_minus:
            v_minus[k] = m_k
        if want_plus:
            v_plus[k] = p_k
    metadata = {
        "game": spec.name,
        "controls": spec.controls.describe(),
        "lattice_spacing": list(lattice.spacing),
        "mesh": grid.mesh,
        "side": side,
    }
    return ValueTable(grid=grid, lattice=lattice, v_minus=v_minus, v_plus=v_plus,
                      metadata=metadata)


def recompute_slice(table: ValueTable, spec: GameSpec, k: int, side: str) -> np.ndarray:
    """Redo the backward step at time index k from slice k+1 (bit-exact check)."""
    lifts = _lift_paths(table.lattice, table.grid)
    if side in ("upper", "plus"):
        _, out = _dp_slice(spec, table.grid, table.lattice, k, None,
                           table.v_plus[k + 1], lifts)
    else:
        out, _ = _dp_slice(spec, table.grid, table.lattice, k,
                           table.v_minus[k + 1], None, lifts)
    return out


# ---------------------------------------------------------------------------
# measurable selection
# ---------------------------------------------------------------------------

def measurable_selection(h_grid: np.ndarray, epsilon: float) -> np.ndarray:
    """Smallest-index selection of a near-maximizing column per row.

    For each row p, picks the first index n with h[p, n] = max_m h[p, m]; on
    finite grids the epsilon slack is unused (the maximum is attained exactly),
    but epsilon > 0 is required to match the selection's contract.
    """
    if not epsilon > 0:
        raise DomainError("epsilon must be > 0")
    H = np.asarray(h_grid, dtype=float)
    if H.ndim != 2:
        raise DomainError("h_grid must be a 2-D matrix over P x Q")
    if not np.all(np.isfinite(H)):
        raise EvaluationError("h_grid contains non-finite entries")
    row_max = H.max(axis=1)
    return np.argmax(H == row_max[:, None], axis=1)


# ---------------------------------------------------------------------------
# extremal-shift feedback strategy
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class StepDecision:
    """One feedback decision: chosen control index and companion diagnostics."""

    p_index: int
    u_shifted: float
    companion_kind: str
    companion_index: int
    gradient: tuple


class FeedbackStrategy:
    """Extremal-shift feedback for the minimizing player.

    At each decision node the strategy finds an approximate minimizer of
    u(t, .) + nu(t, x - .) over a companion candidate set, then commits the
    control index achieving min over p of max over q of
    cost + (f, grad nu(t, x - companion)).

    Candidates: the trace itself (zero difference), lattice states lifted to
    constant-history paths, a seeded library of reachable-tube samples, and
    directional probe companions -- the trace with a small terminal offset
    reachable by diverting forcing slack since t0.  The probes realize the
    penalty's cone geometry near zero difference: the exact minimizer over the
    tube sits a tiny value-downhill offset from the trace, and its gradient is
    what aims the control.
    """

    # fraction of the forcing envelope assumed divertible to companion drift
    PROBE_BUDGET_RATE = 0.25
    PROBE_SCALES = (0.25, 1.0, 4.0)  # in units of epsilon^2

    def __init__(self, spec: GameSpec, params: LyapunovParams, value: ValueTable,
                 t0: float, x0: Path, library, side: str = "upper"):
        if value is None:
            raise ConfigurationError("feedback strategy needs a value table")
        if not library and value.lattice is None:
            raise ConfigurationError("empty companion library")
        self.spec = spec
        self.params = params
        self.value = value
        self.side = side
        self.t0 = t0
        self.x0 = x0
        self.library = list(library)
        self._lattice_points = value.lattice.points()
        self._library_values = np.stack([y.values for y in self.library]) \
            if self.library else None

    def _probe_offsets(self, t: float, dim: int):
        """Admissible terminal offsets: +/- scaled eps^2 steps per coordinate,
        capped by the forcing slack accumulated since t0."""
        budget = self.PROBE_BUDGET_RATE * self.spec.l_f * max(t - self.t0, 0.0)
        if budget <= 0.0:
            return []
        eps_sq = self.params.epsilon ** 2
        offsets = []
        for scale in self.PROBE_SCALES:
            s = min(scale * eps_sq, budget)
            if s <= 0.0:
                continue
            for d in range(dim):
                for sign in (1.0, -1.0):
                    e = np.zeros(dim)
                    e[d] = sign * s
                    offsets.append(e)
        return offsets

    def _companion_minimum(self, t: float, x: Path):
        """Approximate argmin of u + nu; returns (total, kind, index, gradient)."""
        k = x.grid.node_index(t)
        X = x.values[: k + 1]
        alpha = self.params.alpha(t)
        eps4 = self.params.epsilon ** 4

        def shifted(sup_sq, cur_sq, u_vals):
            live = sup_sq > 1e-28 * (1.0 + cur_sq)
            denom = np.where(live, sup_sq, 1.0)
            ups = np.where(live, (denom - cur_sq) ** 2 / denom + 2.0 * cur_sq, 0.0)
            return u_vals + alpha * np.sqrt(eps4 + ups)

        trace_state = X[-1]
        best_total = float(self.value.interp(self.side, t, trace_state)
                           + alpha * np.sqrt(eps4))
        best = (best_total, "trace", 0, np.zeros(x.dim))

        # probes: trace plus a gradual drift to offset o; the difference path
        # rises to |o| at time t, so sup = cur = |o| and theta = 4
        for i, o in enumerate(self._probe_offsets(t, x.dim)):
            state = trace_state - o
            try:
                u_val = self.value.interp(self.side, t, state)
            except LatticeCoverageError:
                continue
            s_sq = float(o @ o)
            ups = 2.0 * s_sq
            beta = np.sqrt(eps4 + ups)
            total = u_val + alpha * beta
            if total < best[0]:
                grad = (alpha / (2.0 * beta)) * 4.0 * o
                best = (float(total), "probe", i, grad)

        def full_gradient(diff_rows):
            sq = np.sum(diff_rows ** 2, axis=1)
            sup_sq, cur_sq = float(np.max(sq)), float(sq[-1])
            if sup_sq <= 1e-28 * (1.0 + cur_sq):
                return np.zeros(x.dim)
            theta = 4.0 * cur_sq / sup_sq
            beta = self.params.beta((sup_sq - cur_sq) ** 2 / sup_sq + 2.0 * cur_sq)
            return (alpha / (2.0 * beta)) * theta * diff_rows[-1]

        diffs = X[:, None, :] - self._lattice_points[None, :, :]
        sq = np.sum(diffs ** 2, axis=2)
        lat_total = shifted(sq.max(axis=0), sq[-1],
                            self.value.interp_batch(self.side, t, self._lattice_points))
        i = int(np.argmin(lat_total))
        if lat_total[i] < best[0]:
            best = (float(lat_total[i]), "lattice", i,
                    full_gradient(X - self._lattice_points[i][None, :]))

        if self._library_values is not None:
            d = X[None, :, :] - self._library_values[:, : k + 1, :]
            sq = np.sum(d ** 2, axis=2)
            lib_states = self._library_values[:, k, :]
            lib_total = shifted(sq.max(axis=1), sq[:, -1],
                                self.value.interp_batch(self.side, t, lib_states))
            i = int(np.argmin(lib_total))
            if lib_total[i] < best[0]:
                best = (float(lib_total[i]), "library", i,
                        full_gradient(X - self._library_values[i, : k + 1, :]))
        return best

    def shifted_value(self, t: float, x: Path) -> float:
        """u_a(t, x) = min over companion candidates of u + nu."""
        return self._companion_minimum(t, x)[0]

    def gradient_at(self, t: float, x: Path, companion_state) -> np.ndarray:
        """Penalty gradient against an explicit constant companion state."""
        k = x.grid.node_index(t)
        X = x.values[: k + 1]
        diff = X - np.atleast_1d(companion_state)[None, :]
        sq = np.sum(diff ** 2, axis=1)
        sup_sq, cur_sq = float(np.max(sq)), float(sq[-1])
        if sup_sq <= 1e-28 * (1.0 + cur_sq):
            return np.zeros(x.dim)
        theta = 4.0 * cur_sq / sup_sq
        ups = (sup_sq - cur_sq) ** 2 / sup_sq + 2.0 * cur_sq
        beta = self.params.beta(ups)
        return (self.params.alpha(t) / (2.0 * beta)) * theta * diff[-1]

    def select(self, t: float, x: Path) -> StepDecision:
        """Decide the control index at node (t, x); deterministic, smallest-index ties."""
        best_val, kind, index, g = self._companion_minimum(t, x)
        M = self.spec.stage_matrix(t, x, g)
        p_index = int(np.argmin(M.max(axis=1)))
        return StepDecision(p_index=p_index, u_shifted=best_val, companion_kind=kind,
                            companion_index=index, gradient=tuple(float(v) for v in g))


def extremal_shift_strategy(spec: GameSpec, params: LyapunovParams, t0: float,
                            x0: Path, partition: TimeGrid, *, value: ValueTable,
                            library_size: int = 64, seed: int = 0,
                            side: str = "upper") -> FeedbackStrategy:
    """Build the extremal-shift strategy with its companion library.

    x0 is the history path; it is resampled onto the simulation grid (the value
    grid refined with the partition nodes).  The library holds reachable-tube
    samples started at (t0, x0).
    """
    if library_size < 0:
        raise ConfigurationError("library_size must be >= 0")
    if abs(partition.t_start - t0) > 1e-9 or \
            abs(partition.t_end - value.grid.t_end) > 1e-9:
        raise DomainError("partition must span [t0, T]")
    inner = simulation_grid(value.grid, partition)
    hist = _extend_history(x0, inner, t0)
    library = []
    if library_size > 0:
        tube = DelayDynamics.forced(spec.dyn.op, spec.l_f)
        library = [rep.path for rep in
                   sample_reachable_set(tube, t0, hist, library_size, seed)]
    return FeedbackStrategy(spec, params, value, t0, hist, library, side=side)


def simulation_grid(value_grid: TimeGrid, partition: TimeGrid) -> TimeGrid:
    """Union of value-grid and partition nodes.

    The partition covers [t0, T] for some t0 at or after the value grid's
    start; both must end at the same horizon.
    """
    if partition.t_start < value_grid.t_start - 1e-12 or \
            abs(value_grid.t_end - partition.t_end) > 1e-12:
        raise DomainError("partition must lie within the value grid span and end at T")
    nodes = np.union1d(value_grid.nodes, partition.nodes)
    keep = [nodes[0]]
    for t in nodes[1:]:
        if t - keep[-1] > 1e-12:
            keep.append(t)
    return TimeGrid.from_nodes(keep)


def _extend_history(x0: Path, grid: TimeGrid, t0: float) -> Path:
    vals = np.empty((grid.n_steps + 1, x0.dim))
    xt0 = x0.value_at(min(t0, x0.grid.t_end))
    for i, t in enumerate(grid.nodes):
        vals[i] = x0.value_at(t) if t <= t0 + 1e-12 else xt0
    return Path(grid, vals)


# ---------------------------------------------------------------------------
# feedback game runs
# ---------------------------------------------------------------------------

@dataclass(frozen=True, eq=False)
class StrategyTrace:
    """Full record of one feedback-controlled run."""

    partition: TimeGrid
    p_indices: tuple
    q_indices: tuple
    path: Path
    running_cost: float
    terminal_cost: float
    step_records: tuple

    @property
    def payoff(self) -> float:
        return self.running_cost + self.terminal_cost

    def to_json_obj(self) -> dict:
        return {
            "partition": [float(t) for t in self.partition.nodes],
            "p_indices": list(self.p_indices),
            "q_indices": list(self.q_indices),
            "path": self.path.to_json_obj(),
            "running_cost": self.running_cost,
            "terminal_cost": self.terminal_cost,
            "payoff": self.payoff,
            "step_records": [dict(r) for r in self.step_records],
        }

    def to_csv(self) -> str:
        """Per-step table: time, controls, cost, and Lyapunov diagnostic pieces."""
        lines = ["t,dt,p_index,q_index,step_cost,u_shifted_before,u_shifted_after,residual"]
        for p_idx, q_idx, rec in zip(self.p_indices, self.q_indices, self.step_records):
            lines.append(f"{rec['t']:.17g},{rec['dt']:.17g},{p_idx},{q_idx},"
                         f"{rec['step_cost']:.17g},{rec['u_shifted_before']:.17g},"
                         f"{rec['u_shifted_after']:.17g},{rec['residual']:.17g}")
        return "\n".join(lines) + "\n"


def run_feedback_game(spec: GameSpec, strategy: FeedbackStrategy, adversary,
                      partition: TimeGrid) -> StrategyTrace:
    """Play one game: strategy commits p per partition cell, adversary answers q.

    The adversary is any per-step policy (t, stopped path, p_index) -> q_index;
    it sees the committed p, consistent with the upper-value commit order.
    Both controls are held on the cell while the state integrates on the finer
    simulation grid.  Per-step records hold the shifted-value increments used
    by the Lyapunov diagnostic.
    """
    inner = strategy.x0.grid
    nodes = inner.nodes
    values = strategy.x0.values.copy()
    k0 = inner.node_index(strategy.t0)
    part_nodes = partition.nodes
    p_indices, q_indices, records = [], [], []
    running = 0.0
    u_prev = None
    for i in range(partition.n_steps):
        t_i, t_i1 = part_nodes[i], part_nodes[i + 1]
        ka, kb = inner.node_index(t_i), inner.node_index(t_i1)
        held = values.copy()
        held[ka + 1:] = held[ka]
        x_now = Path(inner, held)
        decision = strategy.select(t_i, x_now)
        p_idx = decision.p_index
        q_idx = int(adversary(t_i, x_now, p_idx))
        p = spec.controls.p_points[p_idx]
        q = spec.controls.q_points[q_idx]
        step_cost = 0.0
        for k in range(ka, kb):
            dt = nodes[k + 1] - nodes[k]
            held = values.copy()
            held[k + 1:] = held[k]
            x_stop = Path(inner, held)
            f = spec.drift(nodes[k], x_stop, p, q)
            step_cost += dt * spec.stage_cost(nodes[k], x_stop, p, q)
            target = values[k] + dt * f
            tol = STEP_SOLVE_TOL * (1.0 + float(np.linalg.norm(values[k])))
            values[k + 1], _, _ = _implicit_step(spec.dyn.op, nodes[k + 1], dt,
                                                 target, values[k], tol, k)
        running += step_cost
        u_here = decision.u_shifted if u_prev is None else u_prev
        held = values.copy()
        held[kb + 1:] = held[kb]
        u_next = strategy.shifted_value(t_i1, Path(inner, held))
        records.append({
            "t": float(t_i),
            "dt": float(t_i1 - t_i),
            "step_cost": step_cost,
            "u_shifted_before": u_here,
            "u_shifted_after": u_next,
            "residual": step_cost + u_next - u_here,
            "companion_kind": decision.companion_kind,
            "companion_index": decision.companion_index,
        })
        u_prev = u_next
        p_indices.append(p_idx)
        q_indices.append(q_idx)
    final_path = Path(inner, values)
    return StrategyTrace(partition=partition, p_indices=tuple(p_indices),
                         q_indices=tuple(q_indices), path=final_path,
                         running_cost=running,
                         terminal_cost=spec.final_cost(final_path),
                         step_records=tuple(records))


# -- adversary policies -----------------------------------------------------

def constant_adversary(q_index: int):
    def policy(t, x, p_index):
        return q_index
    policy.describe = f"constant[{q_index}]"
    return policy


def random_adversary(seed: int, n_q: int):
    rng = np.random.default_rng(seed)

    def policy(t, x, p_index):
        return int(rng.integers(n_q))
    policy.describe = f"random[{seed}]"
    return policy


def greedy_adversary(spec: GameSpec, value: ValueTable, side: str = "upper",
                     lookahead: float = None):
    """One-step lookahead maximizer against the committed p."""

    def policy(t, x, p_index):
        p = spec.controls.p_points[p_index]
        dt = lookahead if lookahead is not None else value.grid.mesh
        dt = min(dt, value.grid.t_end - t)
        state = x.value_at(t)
        best_j, best_val = 0, -np.inf
        for j, q in enumerate(spec.controls.q_points):
            f = spec.drift(t, x, p, q)
            target = state + dt * f
            tol = STEP_SOLVE_TOL * (1.0 + float(np.linalg.norm(state)))
            succ, _, _ = _implicit_step(spec.dyn.op, t + dt, dt, target, state, tol, 0)
            val = dt * spec.stage_cost(t, x, p, q) + value.interp(side, t + dt, succ)
            if val > best_val + 1e-15:
                best_j, best_val = j, val
        return best_j
    policy.describe = "greedy-lookahead"
    return policy


def adversary_pool(spec: GameSpec, value: ValueTable, budget: int, seed: int) -> list:
    """Deterministic nested pool: constants, greedy lookahead, then seeded random."""
    if budget < 1:
        raise DomainError("budget must be >= 1")
    pool = [constant_adversary(j) for j in range(spec.controls.n_q)]
    pool.append(greedy_adversary(spec, value))
    i = 0
    while len(pool) < budget:
        pool.append(random_adversary(seed + i, spec.controls.n_q))
        i += 1
    return pool[:budget]


def calibrate_step_bound(spec: GameSpec, strategy: FeedbackStrategy, partitions,
                         calibration_budget: int, seed: int,
                         floor: float = 1e-6) -> float:
    """Empirical Lyapunov step-rate bound m-hat for one configuration.

    Runs a calibration adversary pool over the partitions and returns the
    maximum observed per-step residual rate (cost + shifted-value increment
    per unit time), floored away from zero.  Test runs are then required to
    respect m-hat on at least 95% of steps and 2 * m-hat always.
    """
    pool = adversary_pool(spec, strategy.value, calibration_budget, seed)
    worst = floor
    for partition in partitions:
        for adv in pool:
            trace = run_feedback_game(spec, strategy, adv, partition)
            for rec in trace.step_records:
                worst = max(worst, rec["residual"] / rec["dt"])
    return float(worst)


def lyapunov_violation_stats(traces, m_hat: float) -> dict:
    """Fraction of steps respecting residual <= m_hat * dt, and the worst excess ratio."""
    total, ok, worst_ratio = 0, 0, 0.0
    for trace in traces:
        for rec in trace.step_records:
            total += 1
            bound = m_hat * rec["dt"]
            if rec["residual"] <= bound:
                ok += 1
            else:
                worst_ratio = max(worst_ratio, rec["residual"] / bound)
    return {"steps": total, "within_bound": ok,
            "fraction_within": ok / total if total else 1.0,
            "worst_excess_ratio": worst_ratio}


@dataclass(frozen=True, eq=False)
class GuaranteeEstimate:
    """Sampled guaranteed result: worst payoff over adversaries and partitions."""

    value: float
    per_partition: tuple
    budget: int
    seed: int
    certificate: dict

    def to_json_obj(self) -> dict:
        return {
            "value": self.value,
            "per_partition": [dict(p) for p in self.per_partition],
            "budget": self.budget,
            "seed": self.seed,
            "certificate": dict(self.certificate),
        }


def estimate_guaranteed_result(spec: GameSpec, strategy: FeedbackStrategy,
                               t0: float, x0: Path, adversary_budget: int,
                               partitions, *, seed: int = 0) -> GuaranteeEstimate:
    """Max payoff over the sampled adversary pool and the listed partitions."""
    if abs(strategy.t0 - t0) > 1e-9:
        raise ConfigurationError(
            f"strategy was built for t0={strategy.t0}, estimate asked for t0={t0}")
    if np.linalg.norm(strategy.x0.value_at(t0) - x0.value_at(min(t0, x0.grid.t_end))) > 1e-9:
        raise ConfigurationError("strategy history does not match the requested start state")
    per_partition = []
    overall = -np.inf
    pool = adversary_pool(spec, strategy.value, adversary_budget, seed)
    for partition in partitions:
        worst = -np.inf
        worst_adv = None
        for adv in pool:
            trace = run_feedback_game(spec, strategy, adv, partition)
            if trace.payoff > worst:
                worst, worst_adv = trace.payoff, getattr(adv, "describe", "?")
        per_partition.append({"n_steps": partition.n_steps, "mesh": partition.mesh,
                              "worst_payoff": worst, "worst_adversary": worst_adv})
        overall = max(overall, worst)
    certificate = {
        "seed": seed,
        "budget": adversary_budget,
        "pool": [getattr(a, "describe", "?") for a in pool],
        "partition_meshes": [p.mesh for p in partitions],
    }
    return GuaranteeEstimate(value=float(overall), per_partition=tuple(per_partition),
                             budget=adversary_budget, seed=seed, certificate=certificate)


# ---------------------------------------------------------------------------
# desk-scale game builders
# ---------------------------------------------------------------------------

def bilinear_game(scale: float = 1.0, levels=(-1.0, 1.0), gain: float = 1.0,
                  terminal: str = "abs") -> GameSpec:
    """dim-1 game with drift scale * p * q: the classic non-Isaacs example."""
    op = make_linear_operator(dim=1, gain=gain)
    dyn = DelayDynamics(op=op,
                        rhs=lambda t, x, u: np.array([scale * u[0] * u[1]]),
                        lipschitz_L=abs(scale) * max(abs(v) for v in levels) ** 2)
    h = (lambda x: float(np.linalg.norm(x.values[-1]))) if terminal == "abs" \
        else (lambda x: float(np.dot(x.values[-1], x.values[-1])))
    return GameSpec(dyn=dyn,
                    running_cost=lambda t, x, p, q: 0.0,
                    terminal_cost=h,
                    controls=ControlGrid(p_points=levels, q_points=levels),
                    l_f=dyn.lipschitz_L, lambda_L=0.1, name="bilinear")


def isaacs_game(scale: float = 0.5, levels=(-1.0, 0.0, 1.0), gain: float = 1.0,
                cost_weight: float = 0.1) -> GameSpec:
    """dim-1 Isaacs game: drift scale * (p + q), state-quadratic running cost.

    The stage objective is separable in (p, q), so min-max equals max-min and
    the Isaacs gap vanishes identically.
    """
    op = make_linear_operator(dim=1, gain=gain)
    level_max = max(abs(v) for v in levels)
    dyn = DelayDynamics(op=op,
                        rhs=lambda t, x, u: np.array([scale * (float(u[0]) + float(u[1]))]),
                        lipschitz_L=2.0 * abs(scale) * level_max)

    def running(t, x, p, q):
        xt = x.value_at(t)
        return cost_weight * float(np.dot(xt, xt))

    def terminal(x):
        return float(np.dot(x.values[-1], x.values[-1]))

    # state bound on the tube from x0 ~ O(1): dissipative gain-1 drift keeps
    # |x| <= ~1.5, so the sup-norm Lipschitz constant of the running cost is
    # cost_weight * 2 * 1.5
    lam = max(3.0 * cost_weight, 0.1)
    return GameSpec(dyn=dyn, running_cost=running, terminal_cost=terminal,
                    controls=ControlGrid(p_points=levels, q_points=levels),
                    l_f=dyn.lipschitz_L, lambda_L=lam, name="isaacs-additive")


def constant_game(cost: float = 1.0, gain: float = 1.0) -> GameSpec:
    """Zero dynamics forcing, constant running cost: value is cost * (T - t)."""
    op = make_linear_operator(dim=1, gain=gain)
    dyn = DelayDynamics(op=op, rhs=lambda t, x, u: np.zeros(1), lipschitz_L=0.0)
    return GameSpec(dyn=dyn,
                    running_cost=lambda t, x, p, q: cost,
                    terminal_cost=lambda x: 0.0,
                    controls=ControlGrid(p_points=(0.0,), q_points=(0.0,)),
                    l_f=0.0, lambda_L=0.1, name="constant")


def scale_costs(spec: GameSpec, factor: float) -> GameSpec:
    """Multiply running and terminal costs jointly by a positive factor."""
    return GameSpec(dyn=spec.dyn,
                    running_cost=lambda t, x, p, q: factor * spec.running_cost(t, x, p, q),
                    terminal_cost=lambda x: factor * spec.terminal_cost(x),
                    controls=spec.controls, l_f=spec.l_f,
                    lambda_L=spec.lambda_L * max(factor, 1e-12),
                    name=f"{spec.name}-x{factor:g}")


def with_terminal_shift(spec: GameSpec, shift: float) -> GameSpec:
    """Add a constant to the terminal cost (stability experiment family)."""
    return GameSpec(dyn=spec.dyn, running_cost=spec.running_cost,
                    terminal_cost=lambda x: spec.terminal_cost(x) + shift,
                    controls=spec.controls, l_f=spec.l_f, lambda_L=spec.lambda_L,
                    name=f"{spec.name}-hshift")


def with_drift_perturbation(spec: GameSpec, magnitude: float) -> GameSpec:
    """Add a constant drift, perturbing the Hamiltonian z-dependently by (w, z)."""
    dim = spec.dyn.op.space.dim
    w = np.full(dim, magnitude)

    def rhs(t, x, u):
        return np.atleast_1d(spec.dyn.rhs(t, x, u)) + w

    dyn = DelayDynamics(op=spec.dyn.op, rhs=rhs,
                        lipschitz_L=spec.dyn.lipschitz_L + abs(magnitude) * np.sqrt(dim))
    return GameSpec(dyn=dyn, running_cost=spec.running_cost,
                    terminal_cost=spec.terminal_cost, controls=spec.controls,
                    l_f=spec.l_f + abs(magnitude) * np.sqrt(dim),
                    lambda_L=spec.lambda_L, name=f"{spec.name}-fdrift")
