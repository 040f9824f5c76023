"""Discrete paths: time grids, stopped paths, sup norms, and the d-infinity pseudometric.

A path is a piecewise-linear interpolant of samples on a time grid with values
in a finite-dimensional state space.  All types are immutable after
construction and safe to share across threads.
"""

from __future__ import annotations

import csv
import io
import json
import math
from dataclasses import dataclass, field

import numpy as np

from .errors import DomainError

_NODE_TOL = 1e-12


@dataclass(frozen=True)
class TimeGrid:
    """Strictly increasing time nodes t_0 < t_1 < ... < t_n on [t_start, t_end].

    Uniform by default; explicit nodes support non-uniform partitions.

    Attributes
    ----------
    t_start, t_end : float
        Grid span, t_end - t_start > 0.
    n_steps : int
        Number of intervals (nodes = n_steps + 1).
    """

    t_start: float
    t_end: float
    n_steps: int
    explicit_nodes: tuple = field(default=None, repr=False)

    def __post_init__(self):
        if not (self.t_end > self.t_start):
            raise DomainError(f"need t_end > t_start, got [{self.t_start}, {self.t_end}]")
        if self.n_steps < 1:
            raise DomainError(f"need n_steps >= 1, got {self.n_steps}")
        if self.explicit_nodes is not None:
            nodes = np.asarray(self.explicit_nodes, dtype=float)
            if len(nodes) != self.n_steps + 1:
                raise DomainError("explicit node count does not match n_steps + 1")
            if not np.all(np.diff(nodes) > 0):
                raise DomainError("nodes must be strictly increasing")
            if abs(nodes[0] - self.t_start) > _NODE_TOL or abs(nodes[-1] - self.t_end) > _NODE_TOL:
                raise DomainError("explicit nodes must span [t_start, t_end]")

    @classmethod
    def from_nodes(cls, nodes) -> "TimeGrid":
        nodes = tuple(float(t) for t in nodes)
        return cls(nodes[0], nodes[-1], len(nodes) - 1, explicit_nodes=nodes)

    @property
    def nodes(self) -> np.ndarray:
        if self.explicit_nodes is not None:
            return np.asarray(self.explicit_nodes, dtype=float)
        return np.linspace(self.t_start, self.t_end, self.n_steps + 1)

    @property
    def mesh(self) -> float:
        """Maximum step size."""
        return float(np.max(np.diff(self.nodes)))

    def contains(self, t: float) -> bool:
        return self.t_start - _NODE_TOL <= t <= self.t_end + _NODE_TOL

    def require_contains(self, t: float, what: str = "t"):
        if not self.contains(t):
            raise DomainError(f"{what}={t} outside grid span [{self.t_start}, {self.t_end}]")

    def node_index(self, t: float, tol: float = 1e-9) -> int:
        """Index of the node equal to t, or DomainError if t is not a node."""
        nodes = self.nodes
        k = int(np.argmin(np.abs(nodes - t)))
        if abs(nodes[k] - t) > tol * max(1.0, abs(self.t_end)):
            raise DomainError(f"t={t} is not a grid node")
        return k

    def refine(self, factor: int = 2) -> "TimeGrid":
        """Subdivide every interval `factor` times."""
        if factor < 1:
            raise DomainError("factor must be >= 1")
        if self.explicit_nodes is None:
            return TimeGrid(self.t_start, self.t_end, self.n_steps * factor)
        nodes = self.nodes
        out = [nodes[0]]
        for a, b in zip(nodes[:-1], nodes[1:]):
            out.extend(a + (b - a) * (j + 1) / factor for j in range(factor))
        return TimeGrid.from_nodes(out)


def _as_matrix(values, n_nodes: int) -> np.ndarray:
    arr = np.asarray(values, dtype=float)
    if arr.ndim == 1:
        arr = arr[:, None]
    if arr.ndim != 2 or arr.shape[0] != n_nodes:
        raise DomainError(f"values shape {arr.shape} does not match {n_nodes} grid nodes")
    if not np.all(np.isfinite(arr)):
        raise DomainError("path values must be finite")
    return arr


@dataclass(frozen=True, eq=False)
class Path:
    """Piecewise-linear path on a time grid with values in R^dim.

    `values` has one row per grid node.  The array is copied and frozen at
    construction; Path objects never mutate.
    """

    grid: TimeGrid
    values: np.ndarray

    def __post_init__(self):
        arr = _as_matrix(self.values, self.grid.n_steps + 1).copy()
        arr.setflags(write=False)
        object.__setattr__(self, "values", arr)

    # -- constructors -------------------------------------------------------

    @classmethod
    def constant(cls, grid: TimeGrid, point) -> "Path":
        point = np.atleast_1d(np.asarray(point, dtype=float))
        return cls(grid, np.tile(point, (grid.n_steps + 1, 1)))

    @classmethod
    def zero(cls, grid: TimeGrid, dim: int = 1) -> "Path":
        return cls(grid, np.zeros((grid.n_steps + 1, dim)))

    @classmethod
    def from_function(cls, grid: TimeGrid, fn) -> "Path":
        return cls(grid, np.array([np.atleast_1d(fn(t)) for t in grid.nodes], dtype=float))

    # -- basic queries -------------------------------------------------------

    @property
    def dim(self) -> int:
        return self.values.shape[1]

    def value_at(self, t: float) -> np.ndarray:
        """Piecewise-linear interpolant at time t (clamped to the span ends)."""
        self.grid.require_contains(t)
        nodes = self.grid.nodes
        t = min(max(t, nodes[0]), nodes[-1])
        k = int(np.searchsorted(nodes, t, side="right")) - 1
        k = min(max(k, 0), len(nodes) - 2)
        h = nodes[k + 1] - nodes[k]
        w = (t - nodes[k]) / h
        return (1.0 - w) * self.values[k] + w * self.values[k + 1]

    def node_norms(self) -> np.ndarray:
        """Euclidean |x(t_k)| at every node."""
        return np.linalg.norm(self.values, axis=1)

    def running_sup_norms(self) -> np.ndarray:
        """sup_{s <= t_k} |x(s)| at every node (exact for polylines)."""
        return np.maximum.accumulate(self.node_norms())

    def with_values(self, values) -> "Path":
        return Path(self.grid, values)

    def resample(self, grid: TimeGrid) -> "Path":
        """Interpolate onto another grid covering a subset of this path's span."""
        if grid.t_start < self.grid.t_start - _NODE_TOL or grid.t_end > self.grid.t_end + _NODE_TOL:
            raise DomainError("resample target grid exceeds the path span")
        return Path(grid, np.array([self.value_at(t) for t in grid.nodes]))

    def __sub__(self, other: "Path") -> "Path":
        if self.grid != other.grid:
            other = other.resample(self.grid)
        return Path(self.grid, self.values - other.values)

    # -- serialization -------------------------------------------------------

    def to_csv(self) -> str:
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(["t"] + [f"x_{i + 1}" for i in range(self.dim)])
        for t, row in zip(self.grid.nodes, self.values):
            writer.writerow([f"{t:.17g}"] + [f"{v:.17g}" for v in row])
        return buf.getvalue()

    @classmethod
    def from_csv(cls, text: str) -> "Path":
        rows = list(csv.reader(io.StringIO(text)))
        if not rows or rows[0][0] != "t":
            raise DomainError("path CSV must start with a 't,x_1,...' header")
        data = np.array([[float(v) for v in row] for row in rows[1:]], dtype=float)
        return cls(_grid_from_nodes(data[:, 0]), data[:, 1:])

    def to_json_obj(self) -> dict:
        return {
            "format": "path-v1",
            "t": [float(t) for t in self.grid.nodes],
            "x": [[float(v) for v in row] for row in self.values],
        }

    def to_json(self) -> str:
        return json.dumps(self.to_json_obj(), sort_keys=True)

    @classmethod
    def from_json_obj(cls, obj: dict) -> "Path":
        if obj.get("format") != "path-v1":
            raise DomainError("not a path-v1 JSON object")
        return cls(_grid_from_nodes(np.asarray(obj["t"], dtype=float)), obj["x"])

    @classmethod
    def from_json(cls, text: str) -> "Path":
        return cls.from_json_obj(json.loads(text))


def _grid_from_nodes(nodes: np.ndarray) -> TimeGrid:
    nodes = np.asarray(nodes, dtype=float)
    n = len(nodes) - 1
    uniform = np.linspace(nodes[0], nodes[-1], n + 1)
    if np.max(np.abs(uniform - nodes)) <= _NODE_TOL * max(1.0, abs(nodes[-1])):
        return TimeGrid(float(nodes[0]), float(nodes[-1]), n)
    return TimeGrid.from_nodes(nodes)


def stop_path(x: Path, t: float) -> Path:
    """Freeze the path at time t: agrees with x on [t_start, t], constant x(t) after.

    If t falls strictly between grid nodes, the kink at t is not representable
    on the original grid, so t is inserted as a node; the result is then exact
    and stopping is idempotent.
    """
    x.grid.require_contains(t)
    nodes = x.grid.nodes
    xt = x.value_at(t)
    vals = x.values.copy()
    vals[nodes > t + _NODE_TOL] = xt
    candidate = Path(x.grid, vals)
    if np.linalg.norm(candidate.value_at(t) - xt) <= _NODE_TOL * (1.0 + np.linalg.norm(xt)):
        return candidate
    grid = TimeGrid.from_nodes(np.sort(np.append(nodes, t)))
    return stop_path(x.resample(grid), t)


def sup_norm(x: Path, t: float) -> float:
    """max_{s <= t} |x(s)| over grid nodes plus the interpolated value at t.

    Exact for polylines: |x(s)| is convex on each linear segment, so the
    running maximum is attained at nodes (or at t itself).
    """
    x.grid.require_contains(t)
    nodes = x.grid.nodes
    mask = nodes <= t + _NODE_TOL
    best = float(np.max(np.linalg.norm(x.values[mask], axis=1))) if np.any(mask) else 0.0
    return max(best, float(np.linalg.norm(x.value_at(t))))


def d_infinity(pair1, pair2) -> float:
    """Pseudometric |t1 - t2| + sup_s |x1(s ^ t1) - x2(s ^ t2)| for (t, path) pairs.

    Paths may live on different grids with the same span; values are compared
    on the union of both node sets plus the two stop times, which is exact for
    polylines.
    """
    t1, x1 = pair1
    t2, x2 = pair2
    g1, g2 = x1.grid, x2.grid
    if abs(g1.t_start - g2.t_start) > _NODE_TOL or abs(g1.t_end - g2.t_end) > _NODE_TOL:
        raise DomainError("paths must share the same time span")
    g1.require_contains(t1, "t1")
    g2.require_contains(t2, "t2")
    times = np.union1d(np.union1d(g1.nodes, g2.nodes), [t1, t2])
    v1 = np.array([x1.value_at(min(s, t1)) for s in times])
    v2 = np.array([x2.value_at(min(s, t2)) for s in times])
    return abs(t1 - t2) + float(np.max(np.linalg.norm(v1 - v2, axis=1)))


@dataclass(frozen=True)
class StateSpace:
    """Finite-dimensional stand-in for the Gelfand triple V in H in V*.

    |.|_H is Euclidean; ||.||_V is the weighted p-norm (sum_i w_i |v_i|^p)^(1/p);
    the duality pairing is the Euclidean inner product.  Weights default to
    dim^(p/2 - 1) >= 1, which makes |v|_H <= ||v||_V hold with constant 1.
    """

    dim: int
    p_exp: float = 2.0
    q_exp: float = None
    v_weights: tuple = None

    def __post_init__(self):
        if self.dim < 1:
            raise DomainError("dim must be >= 1")
        if self.p_exp < 2.0:
            raise DomainError("p exponent must be >= 2")
        q = self.q_exp if self.q_exp is not None else self.p_exp / (self.p_exp - 1.0)
        if abs(1.0 / self.p_exp + 1.0 / q - 1.0) > 1e-12:
            raise DomainError("exponents must satisfy 1/p + 1/q = 1")
        object.__setattr__(self, "q_exp", float(q))
        w_min = self.dim ** (self.p_exp / 2.0 - 1.0)
        if self.v_weights is None:
            w = np.full(self.dim, w_min)
        else:
            w = np.asarray(self.v_weights, dtype=float)
            if w.shape != (self.dim,):
                raise DomainError("v_weights must have one entry per coordinate")
            # weights >= dim^(p/2-1) >= 1 keep the V->H embedding constant at 1
            if np.any(w < w_min - 1e-12):
                raise DomainError(f"v_weights must be >= dim^(p/2-1) = {w_min:g}")
        object.__setattr__(self, "v_weights", tuple(float(x) for x in w))

    @property
    def weights(self) -> np.ndarray:
        return np.asarray(self.v_weights)

    def norm_h(self, v) -> float:
        return float(np.linalg.norm(np.atleast_1d(v)))

    def norm_v(self, v) -> float:
        v = np.atleast_1d(np.asarray(v, dtype=float))
        return float(np.sum(self.weights * np.abs(v) ** self.p_exp) ** (1.0 / self.p_exp))

    def dual_norm(self, h) -> float:
        """Norm on V* induced by ||.||_V through the Euclidean pairing."""
        h = np.atleast_1d(np.asarray(h, dtype=float))
        q = self.q_exp
        return float(np.sum(self.weights ** (-q / self.p_exp) * np.abs(h) ** q) ** (1.0 / q))

    def pairing(self, h, v) -> float:
        return float(np.dot(np.atleast_1d(h), np.atleast_1d(v)))


def kappa_constant() -> float:
    """The sandwich constant (3 - sqrt(5)) / 2."""
    return (3.0 - math.sqrt(5.0)) / 2.0
