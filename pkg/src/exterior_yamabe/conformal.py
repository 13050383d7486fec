"""Conformal changes g' = phi^(4/(n-2)) g and the curvature read-back map.

Given phi > 0 with phi -> 1, the curvatures of g' are

    R' = phi^(1 - 2 qbar) (-(1/c_n) Lap_g phi + R phi)
    H' = phi(1)^(-qbar) ((1/d_n) d_nu phi + H phi(1))

with d_nu the g-unit derivative along the normal pointing out of M.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ._io import dumps_json
from .calculus import end_derivatives, laplacian
from .domain import (
    DECAY_TOL,
    CurvatureTarget,
    GridFunction,
    Metric,
    RadialGrid,
    as_values,
    flat_metric,
)


def _checked_phi(metric: Metric, phi) -> np.ndarray:
    ph = np.asarray(as_values(phi), dtype=float)
    if ph.shape != metric.grid.nodes.shape:
        raise ValueError("phi must have one value per node")
    if np.any(~np.isfinite(ph)) or np.any(ph <= 0):
        raise ValueError("conformal factor must be positive at every node")
    if abs(ph[-1] - 1.0) > DECAY_TOL:
        raise ValueError("conformal factor does not tend to 1")
    return ph


def conformal_curvatures(metric: Metric, phi) -> CurvatureTarget:
    """(R', H') of phi^(4/(n-2)) g, read back from the discrete operators."""
    ph = _checked_phi(metric, phi)
    if np.all(ph == 1.0):
        return CurvatureTarget(metric.R.copy(), metric.H)
    dims = metric.dims
    lap = laplacian(metric, ph, far_value=1.0).values
    Rp = ph ** (1 - dims.two_qbar) * (-lap / dims.c_n + metric.R * ph)
    # unit normal derivative of g: d_nu = phi_g(1)^(-2/(n-2)) * (-d/dr)
    dnu = -metric.phi[0] ** (-2.0 / (dims.n - 2)) * end_derivatives(metric.grid, ph)[0]
    Hp = ph[0] ** (-dims.qbar) * (dnu / dims.d_n + metric.H * ph[0])
    return CurvatureTarget(Rp, Hp)


def apply_conformal(metric: Metric, phi) -> Metric:
    ph = _checked_phi(metric, phi)
    if np.all(ph == 1.0):
        return metric
    t = conformal_curvatures(metric, ph)
    return Metric(metric.grid, metric.phi * ph, t.Rp, t.Hp, metric.tau)


@dataclass(frozen=True, eq=False)
class MmsCase:
    """Harmonic factor phi = 1 + a r^(2-n) on the flat exterior."""

    a: float
    phi: GridFunction
    target: CurvatureTarget
    u_exact: GridFunction

    def as_record(self) -> dict:
        g = self.phi.grid
        return {
            "n": g.dims.n,
            "nodes": g.nodes,
            "phi": self.phi.values,
            "R": self.target.Rp,
            "H": self.target.Hp,
            "u_exact": self.u_exact.values,
        }

    def to_json(self) -> str:
        return dumps_json(self.as_record())


def mms_case(grid: RadialGrid, a: float) -> MmsCase:
    if not a > -1:
        raise ValueError("need a > -1 so that 1 + a r^(2-n) stays positive")
    dims = grid.dims
    u = a * grid.nodes ** (2 - dims.n)
    phi = 1.0 + u
    _checked_phi(flat_metric(grid), phi)
    # d_nu phi(1) = (n-2) a and H = 1, so H' = (1 + 3a) / (1 + a)^qbar for every n
    Hp = (1 + 3 * a) / (1 + a) ** dims.qbar
    target = CurvatureTarget(np.zeros_like(u), Hp)
    return MmsCase(float(a), GridFunction(grid, phi), target, GridFunction(grid, u))
