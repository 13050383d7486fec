"""Discrete calculus on a radial grid.

All quadratic forms are P1 finite elements in r with the r^(n-1) weight
integrated exactly and a lumped (diagonal) mass.  The Laplacian is the
matching conservative three-point difference, so summation by parts holds
exactly between :func:`laplacian`, the boundary flux and the Dirichlet form.

Functions decay to a far value u_inf at infinity.  The exterior of
R_max is closed with the r^(2-n) mode, whose Dirichlet energy beyond
R_max is (n-2) R_max^(n-2) (u_N - u_inf)^2 per unit solid angle; this is the
Robin row u' + (n-2)/R_max (u - u_inf) = 0.
"""
from __future__ import annotations

from dataclasses import dataclass
from functools import lru_cache

import numpy as np

from .domain import GridFunction, Metric, RadialGrid, RegionPair, as_values, flat_metric


@dataclass(frozen=True)
class NormSpec:
    k: int
    p: float
    delta: float

    def __post_init__(self):
        if self.k not in (0, 1, 2):
            raise ValueError(f"derivative order must be 0, 1 or 2, got {self.k}")
        if not self.p >= 1:
            raise ValueError("integrability exponent must be >= 1")


@dataclass(frozen=True, eq=False)
class Assembly:
    """Metric-weighted pieces of every discrete form (per unit solid angle).

    k      element stiffness, phi_e^2 * int_e r^(n-1) dr / h_e^2
    W      lumped volume weights, w_i * phi_i^(2 qbar)
    S      boundary area factor phi_0^(2(n-1)/(n-2))
    T      far-field coefficient (n-2) R_max^(n-2) phi_N^2
    """

    k: np.ndarray
    W: np.ndarray
    S: float
    T: float
    omega: float

    def stiffness_apply(self, u: np.ndarray) -> np.ndarray:
        flux = self.k * np.diff(u)
        Ku = np.zeros_like(u)
        Ku[:-1] -= flux
        Ku[1:] += flux
        return Ku

    def stiffness_bands(self) -> tuple[np.ndarray, np.ndarray]:
        diag = np.zeros(self.k.size + 1)
        diag[:-1] += self.k
        diag[1:] += self.k
        return diag, -self.k.copy()


@lru_cache(maxsize=128)
def assemble(metric: Metric) -> Assembly:
    grid = metric.grid
    dims = grid.dims
    n = dims.n
    phi = metric.phi
    h = grid.steps
    phi2_e = 0.5 * (phi[:-1] ** 2 + phi[1:] ** 2)
    k = phi2_e * grid.elem_moments / h**2
    W = grid.quad_weights * phi ** dims.two_qbar
    S = float(phi[0] ** (2 * (n - 1) / (n - 2)))
    T = float((n - 2) * grid.R_max ** (n - 2) * phi[-1] ** 2)
    for a in (k, W):
        a.setflags(write=False)
    return Assembly(k, W, S, T, grid.sphere_area)


# ---------------------------------------------------------------------------
# derivatives


def _interior_derivs(r: np.ndarray, u: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    h1 = r[1:-1] - r[:-2]
    h2 = r[2:] - r[1:-1]
    um, u0, up = u[:-2], u[1:-1], u[2:]
    d1 = -h2 / (h1 * (h1 + h2)) * um + (h2 - h1) / (h1 * h2) * u0 + h1 / (h2 * (h1 + h2)) * up
    d2 = 2.0 * (um / (h1 * (h1 + h2)) - u0 / (h1 * h2) + up / (h2 * (h1 + h2)))
    return d1, d2


def end_derivatives(grid: RadialGrid, u, at_start: bool = True, points: int = 8) -> tuple[float, float]:
    """u' and u'' at r = 1 (or R_max) from the polynomial through the end nodes.

    With the default 8 nodes the error is O(h^6), which keeps curvature
    read-back at the boundary well below the O(h^2) of the solvers.
    """
    r = grid.nodes
    v = as_values(u)
    m = min(points, r.size)
    sl = slice(0, m) if at_start else slice(r.size - m, None)
    x0 = r[0] if at_start else r[-1]
    x = r[sl] - x0
    s = float(np.max(np.abs(x)))
    V = np.vander(x / s, m, increasing=True)
    c = np.linalg.solve(V, v[sl])
    return float(c[1] / s), float(2.0 * c[2] / s**2)


def derivatives(grid: RadialGrid, u) -> tuple[np.ndarray, np.ndarray]:
    """Nodal u' and u'' (three-point inside, one-sided polynomial fits at both ends)."""
    r = grid.nodes
    v = as_values(u)
    d1 = np.empty_like(v)
    d2 = np.empty_like(v)
    d1[1:-1], d2[1:-1] = _interior_derivs(r, v)
    d1[0], d2[0] = end_derivatives(grid, v, True)
    d1[-1], d2[-1] = end_derivatives(grid, v, False)
    return d1, d2


def normal_derivative_out(u: GridFunction) -> float:
    """-u'(1) from the quadratic through the first three nodes."""
    r = u.grid.nodes
    v = u.values
    h1, H = r[1] - r[0], r[2] - r[0]
    # difference form so that constants give exactly zero
    d1 = (v[1] - v[0]) / h1
    d2 = (v[2] - v[0]) / H
    du = (d1 * H - d2 * h1) / (H - h1)
    return float(-du)


# ---------------------------------------------------------------------------
# norms and forms


def _power_moments(grid: RadialGrid, s: float) -> np.ndarray:
    """int_e r^(s-1) dr on every element, in closed form."""
    a = grid.nodes[:-1]
    L = np.log(grid.nodes[1:] / a)
    if s == 0:
        return L
    return a**s * np.expm1(s * L) / s


def weighted_norm(u: GridFunction, spec: NormSpec) -> float:
    """Weighted Sobolev norm with weight rho^(-delta - n/p + j) on the j-th derivative.

    The j = 1 term integrates the elementwise-constant P1 derivative exactly
    against the weight; j = 0 and j = 2 use the nodal quadrature.  The
    second derivative is |u''| only (no angular Hessian terms).
    """
    grid = u.grid
    n = grid.dims.n
    p, delta = spec.p, spec.delta
    v = u.values
    rho = grid.rho
    omega = grid.sphere_area
    total = omega * np.sum(grid.quad_weights * (rho ** (-delta - n / p) * np.abs(v)) ** p)
    if spec.k >= 1:
        du = np.diff(v) / grid.steps
        s = (-delta - n / p + 1) * p + n
        total += omega * np.sum(np.abs(du) ** p * _power_moments(grid, s))
    if spec.k >= 2:
        _, d2 = derivatives(grid, v)
        total += omega * np.sum(grid.quad_weights * (rho ** (-delta - n / p + 2) * np.abs(d2)) ** p)
    return float(total ** (1.0 / p))


def lebesgue_norm_p(metric: Metric, region: RegionPair, u, q: float) -> float:
    """||u||_{L^q(Omega)}^q in the metric volume (nodal quadrature)."""
    asm = assemble(metric)
    v = region.mask_values(u)
    return float(asm.omega * np.sum(asm.W * np.abs(v) ** q))


def trace_norm_p(metric: Metric, region: RegionPair, u, r: float) -> float:
    """||gamma u||_{L^r(Sigma)}^r; zero unless the trace is free."""
    if not region.boundary_free:
        return 0.0
    asm = assemble(metric)
    return float(asm.omega * asm.S * abs(as_values(u)[0]) ** r)


def l2_delta_sq(grid: RadialGrid, u, delta: float, with_trace: bool = False) -> float:
    """||u||^2 in L^2_delta(M) (flat measure), plus ||gamma u||^2 if asked."""
    v = as_values(u)
    n = grid.dims.n
    val = grid.sphere_area * np.sum(grid.quad_weights * grid.rho ** (-2 * delta - n) * v**2)
    if with_trace:
        val += grid.sphere_area * v[0] ** 2
    return float(val)


def gradient_sq_norm(metric: Metric, region: RegionPair, u) -> float:
    """int_Omega |grad u|_g^2 dV_g over elements with both ends in Omega."""
    asm = assemble(metric)
    v = as_values(u)
    inside = region.omega_mask[:-1] & region.omega_mask[1:]
    return float(asm.omega * np.sum((asm.k * np.diff(v) ** 2)[inside]))


def laplacian(metric: Metric, u, far_value: float | None = None) -> GridFunction:
    """Radial Laplace-Beltrami operator of g applied to u.

    Interior nodes use the conservative difference -(K u)_i / W_i.  At
    r = 1 a one-sided polynomial fit is used.  At R_max the far-field
    closure is used when ``far_value`` (the limit of u at infinity) is known,
    else the same one-sided fit.
    """
    grid = metric.grid
    asm = assemble(metric)
    v = as_values(u)
    Ku = asm.stiffness_apply(v)
    lap = np.empty_like(v)
    lap[1:-1] = -Ku[1:-1] / asm.W[1:-1]

    n = grid.dims.n
    r = grid.nodes
    phi = metric.phi

    def one_sided(at_start: bool) -> float:
        i = 0 if at_start else -1
        du, d2u = end_derivatives(grid, v, at_start)
        dphi, _ = end_derivatives(grid, phi, at_start)
        p = phi[i]
        return float(
            p ** (-grid.dims.two_qbar)
            * (p**2 * d2u + (2 * p * dphi + (n - 1) * p**2 / r[i]) * du)
        )

    lap[0] = one_sided(True)
    if far_value is None:
        lap[-1] = one_sided(False)
    else:
        lap[-1] = -(Ku[-1] + asm.T * (v[-1] - far_value)) / asm.W[-1]
    return GridFunction(grid, lap)


# ---------------------------------------------------------------------------
# inequality probes


def inequality_ratios(grid: RadialGrid, u) -> tuple[float, float] | None:
    """(||u||_{L^2_{delta*}}, ||u||_{L^{2 qbar}}) divided by ||grad u||_{L^2}.

    Returns None for functions with vanishing gradient (0/0 excluded).
    """
    dims = grid.dims
    v = as_values(u)
    flat = flat_metric(grid)
    full = RegionPair(np.ones(v.size, dtype=bool), True)
    grad = np.sqrt(gradient_sq_norm(flat, full, v))
    if grad == 0 or not np.isfinite(grad):
        return None
    gf = GridFunction(grid, v)
    poincare = weighted_norm(gf, NormSpec(0, 2.0, dims.delta_star))
    sobolev = weighted_norm(gf, NormSpec(0, dims.two_qbar, dims.delta_star))
    return poincare / grad, sobolev / grad


def probe_inequalities(grid: RadialGrid, samples: int, seed: int) -> tuple[float, float]:
    """Largest observed Poincare and Sobolev ratios over decaying test functions."""
    if samples < 1:
        raise ValueError("samples must be >= 1")
    n = grid.dims.n
    r = grid.nodes
    lo = (n - 2) / 2 + 0.1
    family = [r ** (-a) for a in np.arange(lo, n - 2 + 1e-9, 0.1)]
    rng = np.random.default_rng(seed)
    logr = np.log(r)
    for _ in range(samples):
        alphas = rng.uniform(lo, n, size=3)
        coef = rng.normal(size=3)
        u = (coef[:, None] * r[None, :] ** (-alphas[:, None])).sum(axis=0)
        mu, sig = rng.uniform(0, logr[-1]), rng.uniform(0.1, 2.0)
        u = u + rng.normal() * np.exp(-(((logr - mu) / sig) ** 2))
        family.append(u)
    c1 = c2 = 0.0
    for u in family:
        ratios = inequality_ratios(grid, u)
        if ratios is None:
            continue
        c1, c2 = max(c1, ratios[0]), max(c2, ratios[1])
    return c1, c2
