"""Radial exterior manifolds: grids, conformally flat metrics, region pairs.

The manifold is the exterior of the unit ball in R^n, discretised on the
radial segment [1, R_max].  Every metric is conformally flat,
g = phi^(4/(n-2)) * (flat), and carries its own samples of the scalar
curvature R and the (normalised) boundary mean curvature H.  The two
are stored rather than derived from phi so that model metrics such as the
"well" can be posed directly.

Conventions (used consistently by every module):

* H is (1/(n-1)) * trace of the shape operator of the sphere r = 1 taken
  with respect to the inner normal, i.e. +d/dr.  The flat exterior has H = 1.
* Boundary derivatives are taken along the normal pointing out of M,
  which is -d/dr at r = 1.
"""
from __future__ import annotations

import math
from collections.abc import Iterable, Sequence
from dataclasses import dataclass, field

import numpy as np

from ._io import dumps_json

#: Largest admissible |phi(R_max) - 1| for a metric to count as asymptotically flat.
DECAY_TOL = 0.1

#: Gauss-Legendre rule used for element moments of polynomial weights.
_GL_X, _GL_W = np.polynomial.legendre.leggauss(8)


def _readonly(a) -> np.ndarray:
    arr = np.array(a, dtype=float)
    arr.setflags(write=False)
    return arr


@dataclass(frozen=True)
class DimensionConstants:
    n: int
    qbar: float = field(init=False)
    two_qbar: float = field(init=False)
    qbar_plus_1: float = field(init=False)
    delta_star: float = field(init=False)
    c_n: float = field(init=False)
    d_n: float = field(init=False)

    def __post_init__(self):
        n = self.n
        if int(n) != n or n < 3:
            raise ValueError(f"dimension must be an integer >= 3, got {n!r}")
        object.__setattr__(self, "n", int(n))
        object.__setattr__(self, "qbar", n / (n - 2))
        object.__setattr__(self, "two_qbar", 2 * n / (n - 2))
        object.__setattr__(self, "qbar_plus_1", n / (n - 2) + 1)
        object.__setattr__(self, "delta_star", (2 - n) / 2)
        object.__setattr__(self, "c_n", (n - 2) / (4 * (n - 1)))
        object.__setattr__(self, "d_n", (n - 2) / 2)

    @property
    def critical_pair(self) -> tuple[float, float]:
        return self.two_qbar, self.qbar_plus_1


@dataclass(frozen=True, eq=False)
class RadialGrid:
    """Nodes 1 = r_0 < ... < r_N = R_max with exact r^(n-1) product quadrature.

    ``quad_weights[i]`` integrates the piecewise linear interpolant of f
    against r^(n-1) dr, so the rule is exact for constants and linears.
    ``elem_moments[e]`` is the integral of r^(n-1) over element e.
    """

    dims: DimensionConstants
    nodes: np.ndarray
    quad_weights: np.ndarray = field(init=False, repr=False)
    elem_moments: np.ndarray = field(init=False, repr=False)
    sphere_area: float = field(init=False)
    rho: np.ndarray = field(init=False, repr=False)

    def __post_init__(self):
        r = np.asarray(self.nodes, dtype=float)
        if r.ndim != 1 or r.size < 3:
            raise ValueError("a grid needs at least three nodes")
        if r[0] != 1.0:
            raise ValueError("the first node must be exactly r = 1")
        if np.any(np.diff(r) <= 0):
            raise ValueError("nodes must be strictly increasing")
        n = self.dims.n
        a, b = r[:-1], r[1:]
        h = b - a
        t = 0.5 * (_GL_X + 1.0)
        pts = a[:, None] + h[:, None] * t[None, :]
        wts = 0.5 * _GL_W[None, :] * h[:, None] * pts ** (n - 1)
        moments = wts.sum(axis=1)
        left = (wts * (1.0 - t)[None, :]).sum(axis=1)
        right = (wts * t[None, :]).sum(axis=1)
        w = np.zeros_like(r)
        w[:-1] += left
        w[1:] += right
        object.__setattr__(self, "nodes", _readonly(r))
        object.__setattr__(self, "quad_weights", _readonly(w))
        object.__setattr__(self, "elem_moments", _readonly(moments))
        object.__setattr__(self, "sphere_area", 2 * math.pi ** (n / 2) / math.gamma(n / 2))
        object.__setattr__(self, "rho", _readonly(r))

    @property
    def N(self) -> int:
        return self.nodes.size - 1

    @property
    def R_max(self) -> float:
        return float(self.nodes[-1])

    @property
    def steps(self) -> np.ndarray:
        return np.diff(self.nodes)

    @property
    def log_step(self) -> float:
        """Largest step in log r; the h entering all O(h^2) tolerances."""
        return float(np.max(np.diff(np.log(self.nodes))))

    def sample(self, f) -> GridFunction:
        return GridFunction(self, f(self.nodes))


def build_grid(n: int, R_max: float, N: int, spacing: str = "log") -> RadialGrid:
    if n < 3:
        raise ValueError("n must be >= 3")
    if not R_max > 1:
        raise ValueError("R_max must exceed 1")
    if N < 16:
        raise ValueError("N must be >= 16")
    if spacing == "log":
        r = np.geomspace(1.0, R_max, N + 1)
    elif spacing == "uniform":
        r = np.linspace(1.0, R_max, N + 1)
    else:
        raise ValueError(f"unknown spacing {spacing!r}")
    r[0], r[-1] = 1.0, float(R_max)
    return RadialGrid(DimensionConstants(n), r)


@dataclass(frozen=True, eq=False)
class GridFunction:
    grid: RadialGrid
    values: np.ndarray

    def __post_init__(self):
        v = np.array(self.values, dtype=float)
        if v.shape != self.grid.nodes.shape:
            raise ValueError("values must have one entry per node")
        v.setflags(write=False)
        object.__setattr__(self, "values", v)

    @property
    def trace(self) -> float:
        return float(self.values[0])

    def with_values(self, values) -> GridFunction:
        return GridFunction(self.grid, values)


def as_values(u) -> np.ndarray:
    """Node values of a GridFunction or array-like."""
    if isinstance(u, GridFunction):
        return u.values
    return np.asarray(u, dtype=float)


@dataclass(frozen=True, eq=False)
class Metric:
    grid: RadialGrid
    phi: np.ndarray
    R: np.ndarray
    H: float
    tau: float = -1.0

    def __post_init__(self):
        N1 = self.grid.nodes.size
        phi = np.array(self.phi, dtype=float) * np.ones(N1)
        R = np.array(self.R, dtype=float) * np.ones(N1)
        if np.any(~np.isfinite(phi)) or np.any(phi <= 0):
            raise ValueError("conformal factor must be positive at every node")
        if abs(phi[-1] - 1.0) > DECAY_TOL:
            raise ValueError(
                f"|phi(R_max) - 1| = {abs(phi[-1] - 1.0):.3g} exceeds the decay tolerance"
            )
        if not self.tau < 0:
            raise ValueError("decay order tau must be negative")
        object.__setattr__(self, "phi", _readonly(phi))
        object.__setattr__(self, "R", _readonly(R))
        object.__setattr__(self, "H", float(self.H))

    @property
    def dims(self) -> DimensionConstants:
        return self.grid.dims

    def to_json(self) -> str:
        return dumps_json(self.as_record())

    def as_record(self) -> dict:
        return {
            "n": self.dims.n,
            "nodes": self.grid.nodes,
            "phi": self.phi,
            "R": self.R,
            "H": self.H,
        }

    @classmethod
    def from_record(cls, rec: dict) -> Metric:
        grid = RadialGrid(DimensionConstants(int(rec["n"])), np.asarray(rec["nodes"], float))
        return cls(grid, rec["phi"], rec["R"], rec["H"])


def flat_metric(grid: RadialGrid) -> Metric:
    return Metric(grid, np.ones_like(grid.nodes), np.zeros_like(grid.nodes), 1.0, tau=-1.0)


def well_metric(grid: RadialGrid, r_lo: float = 1.0, r_hi: float = 2.0, depth: float = 50.0) -> Metric:
    """Flat factor with R = -depth on [r_lo, r_hi]; negative depth gives a bump."""
    r = grid.nodes
    R = np.where((r >= r_lo - 1e-12) & (r <= r_hi + 1e-12), -float(depth), 0.0)
    return Metric(grid, np.ones_like(r), R, 1.0)


def bump_field(grid: RadialGrid, r_lo: float, r_hi: float, depth: float = 1.0) -> np.ndarray:
    """depth * sin^2 on [r_lo, r_hi], zero elsewhere (continuously differentiable)."""
    if not r_hi > r_lo:
        raise ValueError("need r_hi > r_lo")
    r = grid.nodes
    t = np.clip((r - r_lo) / (r_hi - r_lo), 0.0, 1.0)
    return float(depth) * np.sin(np.pi * t) ** 2


@dataclass(frozen=True, eq=False)
class RegionPair:
    """(Omega, Sigma): a node mask for Omega and Sigma in {empty, dM}.

    A boundary trace can only be nonzero when the node r = 1 lies in Omega,
    so ``free_nodes`` drops node 0 unless both hold.  Pairs such as
    (empty, dM) are representable because zero sets produce them.
    """

    omega_mask: np.ndarray
    sigma_included: bool

    def __post_init__(self):
        m = np.array(self.omega_mask, dtype=bool)
        m.setflags(write=False)
        object.__setattr__(self, "omega_mask", m)
        object.__setattr__(self, "sigma_included", bool(self.sigma_included))

    @property
    def boundary_free(self) -> bool:
        return self.sigma_included and bool(self.omega_mask[0])

    @property
    def free_nodes(self) -> np.ndarray:
        free = self.omega_mask.copy()
        if not self.sigma_included:
            free[0] = False
        return free

    @property
    def is_trivial(self) -> bool:
        return not self.free_nodes.any()

    def index_ranges(self) -> list[tuple[int, int]]:
        """Maximal runs [i, j] (inclusive) of nodes in Omega."""
        m = self.omega_mask.astype(np.int8)
        edges = np.diff(np.concatenate([[0], m, [0]]))
        starts = np.flatnonzero(edges == 1)
        stops = np.flatnonzero(edges == -1) - 1
        return list(zip(starts.tolist(), stops.tolist()))

    def to_intervals(self, grid: RadialGrid) -> list[tuple[float, float]]:
        r = grid.nodes
        return [(float(r[i]), float(r[j])) for i, j in self.index_ranges()]

    def mask_values(self, u) -> np.ndarray:
        v = np.where(self.free_nodes, as_values(u), 0.0)
        return v

    def __eq__(self, other) -> bool:
        if not isinstance(other, RegionPair):
            return NotImplemented
        return (
            self.sigma_included == other.sigma_included
            and np.array_equal(self.omega_mask, other.omega_mask)
        )

    __hash__ = None


def full_region(grid: RadialGrid) -> RegionPair:
    return RegionPair(np.ones(grid.nodes.size, dtype=bool), True)


def region_from_intervals(
    grid: RadialGrid,
    intervals: Iterable[Sequence[float]],
    include_boundary: bool,
) -> RegionPair:
    r = grid.nodes
    eps = 1e-12 * grid.R_max
    ivs = sorted((float(lo), float(hi)) for lo, hi in intervals)
    for lo, hi in ivs:
        if lo > hi:
            raise ValueError(f"interval ({lo}, {hi}) is reversed")
        if lo < 1.0 - eps or hi > grid.R_max + eps:
            raise ValueError(f"interval ({lo}, {hi}) leaves [1, {grid.R_max}]")
    for (lo1, hi1), (lo2, hi2) in zip(ivs, ivs[1:]):
        if lo2 <= hi1:
            raise ValueError("intervals overlap")
    mask = np.zeros(r.size, dtype=bool)
    for lo, hi in ivs:
        mask |= (r >= lo - eps) & (r <= hi + eps)
    if include_boundary and not any(lo <= 1.0 + eps for lo, _ in ivs):
        raise ValueError("the boundary can only be included when an interval contains r = 1")
    return RegionPair(mask, include_boundary)


@dataclass(frozen=True, eq=False)
class CurvatureTarget:
    Rp: np.ndarray
    Hp: float
    zero_tol: float | None = None

    def __post_init__(self):
        object.__setattr__(self, "Rp", _readonly(self.Rp))
        object.__setattr__(self, "Hp", float(self.Hp))
        if self.zero_tol is None:
            scale = float(np.max(np.abs(self.Rp))) if self.Rp.size else 0.0
            object.__setattr__(self, "zero_tol", max(1e-12 * scale, 1e-300))

    @property
    def is_nonpositive(self) -> bool:
        return bool(np.all(self.Rp <= 0) and self.Hp <= 0)


def zero_set(target: CurvatureTarget, grid: RadialGrid) -> RegionPair:
    tol = target.zero_tol
    if target.Rp.shape != grid.nodes.shape:
        raise ValueError("target does not live on this grid")
    return RegionPair(np.abs(target.Rp) <= tol, abs(target.Hp) <= tol)
