"""The quadratic energy E_g and the prescribed-curvature functional F_{q,r}.

E(u) = int |grad u|^2 + c_n int R u^2 + d_n int_Sigma H (gamma u)^2, and

F_{q,r}(u) = E(u+1) - (n-2)/(2q(n-1)) int R' |u+1|^q
                    - (n-2)/r int_dM H' |gamma(u+1)|^r,

always over the full pair (M, dM).  Gradients are nodal l2 partial
derivatives of the discrete forms.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .calculus import assemble, l2_delta_sq
from .domain import (
    CurvatureTarget,
    GridFunction,
    Metric,
    RegionPair,
    as_values,
    full_region,
    zero_set,
)
from .normalize import ConstraintError, ExponentTriple, project_to_constraint


@dataclass(frozen=True)
class EnergyBreakdown:
    dirichlet: float
    interior_R: float
    boundary_H: float
    total: float

    @property
    def scale(self) -> float:
        return abs(self.dirichlet) + abs(self.interior_R) + abs(self.boundary_H)


def energy(metric: Metric, region: RegionPair, u, far_value: float = 0.0) -> EnergyBreakdown:
    """E_g of u masked to (Omega, Sigma).

    ``far_value`` is the limit of u at infinity; it only enters the
    far-field closure term.
    """
    asm = assemble(metric)
    c_n, d_n = metric.dims.c_n, metric.dims.d_n
    v = region.mask_values(u)
    om = asm.omega
    dirichlet = om * (float(np.sum(asm.k * np.diff(v) ** 2)) + asm.T * (v[-1] - far_value) ** 2)
    interior = om * c_n * float(np.sum(asm.W * metric.R * v**2))
    boundary = om * d_n * metric.H * asm.S * v[0] ** 2 if region.boundary_free else 0.0
    return EnergyBreakdown(dirichlet, interior, boundary, dirichlet + interior + boundary)


def energy_gradient(metric: Metric, region: RegionPair, u, far_value: float = 0.0) -> GridFunction:
    asm = assemble(metric)
    c_n, d_n = metric.dims.c_n, metric.dims.d_n
    v = region.mask_values(u)
    g = asm.stiffness_apply(v) + c_n * asm.W * metric.R * v
    g[-1] += asm.T * (v[-1] - far_value)
    if region.boundary_free:
        g[0] += d_n * metric.H * asm.S * v[0]
    g = np.where(region.free_nodes, 2.0 * asm.omega * g, 0.0)
    return GridFunction(metric.grid, g)


def energy_bands(metric: Metric) -> tuple[np.ndarray, np.ndarray]:
    """Diagonal and off-diagonal of A with E(v) = v^T A v on (M, dM), far value 0."""
    asm = assemble(metric)
    c_n, d_n = metric.dims.c_n, metric.dims.d_n
    diag, off = asm.stiffness_bands()
    diag = diag + c_n * asm.W * metric.R
    diag[-1] += asm.T
    diag[0] += d_n * metric.H * asm.S
    return asm.omega * diag, asm.omega * off


# ---------------------------------------------------------------------------
# prescribed curvature functional


def _check_target(metric: Metric, target: CurvatureTarget) -> None:
    if target.Rp.shape != metric.grid.nodes.shape:
        raise ValueError("target does not live on the metric's grid")


def curvature_residual(metric: Metric, Rp, Hp: float, q: float, r: float, u) -> np.ndarray:
    """Discrete Euler-Lagrange residual of F_{q,r} per unit solid angle, halved.

    Row i is (K u)_i + W_i c_n (R v - R'|v|^(q-2) v) with v = u + 1, plus the
    far-field closure at R_max and d_n S (H v_0 - H'|v_0|^(r-2) v_0) at r = 1.
    """
    asm = assemble(metric)
    c_n, d_n = metric.dims.c_n, metric.dims.d_n
    uu = as_values(u)
    v = uu + 1.0
    Rp = as_values(Rp)
    G = asm.stiffness_apply(uu) + c_n * asm.W * (metric.R * v - Rp * np.abs(v) ** (q - 2) * v)
    G[-1] += asm.T * uu[-1]
    G[0] += d_n * asm.S * (metric.H * v[0] - Hp * abs(v[0]) ** (r - 2) * v[0])
    return G


def curvature_jacobian_bands(metric: Metric, Rp, Hp: float, q: float, r: float, u):
    asm = assemble(metric)
    c_n, d_n = metric.dims.c_n, metric.dims.d_n
    v = as_values(u) + 1.0
    Rp = as_values(Rp)
    diag, off = asm.stiffness_bands()
    diag = diag + c_n * asm.W * (metric.R - (q - 1) * Rp * np.abs(v) ** (q - 2))
    diag[-1] += asm.T
    diag[0] += d_n * asm.S * (metric.H - (r - 1) * Hp * abs(v[0]) ** (r - 2))
    return diag, off


def f_qr(metric: Metric, target: CurvatureTarget, tri: ExponentTriple, u) -> float:
    """F_{q,r}(u) on (M, dM); ``tri.b`` is ignored."""
    _check_target(metric, target)
    asm = assemble(metric)
    n = metric.dims.n
    q, r = tri.q, tri.r
    v = as_values(u) + 1.0
    E = energy(metric, full_region(metric.grid), v, far_value=1.0).total
    interior = (n - 2) / (2 * q * (n - 1)) * asm.omega * float(np.sum(asm.W * target.Rp * np.abs(v) ** q))
    boundary = (n - 2) / r * asm.omega * asm.S * target.Hp * abs(v[0]) ** r
    return E - interior - boundary


def f_qr_gradient(metric: Metric, target: CurvatureTarget, tri: ExponentTriple, u) -> GridFunction:
    _check_target(metric, target)
    G = curvature_residual(metric, target.Rp, target.Hp, tri.q, tri.r, u)
    return GridFunction(metric.grid, 2.0 * assemble(metric).omega * G)


def coupled_norm(grid, u, delta: float = 0.0) -> float:
    """||u||_{L^2_delta(M, dM)}: weighted bulk norm plus the boundary L^2 norm."""
    return float(np.sqrt(l2_delta_sq(grid, u, delta, with_trace=True)))


def _random_shape(rng: np.random.Generator, r: np.ndarray, n: int) -> np.ndarray:
    logr = np.log(r)
    alpha = rng.uniform((n - 2) / 2 + 0.1, n)
    mu, sig = rng.uniform(0.0, 0.5 * logr[-1]), rng.uniform(0.2, 2.0)
    u = rng.normal() * r ** (-alpha) + rng.normal() * np.exp(-(((logr - mu) / sig) ** 2)) * r ** (2 - n)
    return u


def probe_coercivity(
    metric: Metric,
    target: CurvatureTarget,
    q0: float,
    r0: float,
    B_list,
    samples: int,
    seed: int,
    delta: float = 0.0,
) -> list[tuple[float, float, int]]:
    """Sampled coercivity radii: rows (B, K_hat, count) with count = #{F < B}.

    K_hat is the largest ||u||_{L^2_delta(M,dM)} among samples with F < B
    (0 when there are none), so F >= B held on every sample beyond K_hat.
    """
    B_list = list(B_list)
    if not B_list:
        raise ValueError("B_list must not be empty")
    if not target.is_nonpositive:
        raise ValueError("coercivity needs R' <= 0 and H' <= 0")
    from .yamabe import classify_sign

    Z = zero_set(target, metric.grid)
    if classify_sign(metric, Z, [0.0]) != "positive":
        raise ValueError("the zero-set pair of the target is not Yamabe positive")
    dims = metric.dims
    qc, rc = dims.critical_pair
    if not (2 <= q0 < qc and 2 <= r0 < rc):
        raise ValueError("need 2 <= q0 < 2 qbar and 2 <= r0 < qbar + 1")
    rng = np.random.default_rng(seed)
    r = metric.grid.nodes
    records = [(f_qr(metric, target, ExponentTriple(q0, r0), np.zeros_like(r)), 0.0)]
    for _ in range(samples):
        q = rng.uniform(q0, qc)
        rr = rng.uniform(r0, min(rc, q))
        scale = 10 ** rng.uniform(-2, 3)
        u = np.maximum(scale * _random_shape(rng, r, dims.n), -1.0)
        F = f_qr(metric, target, ExponentTriple(q, rr), u)
        records.append((F, coupled_norm(metric.grid, u, delta)))
    out = []
    for B in B_list:
        below = [nrm for F, nrm in records if F < B]
        out.append((float(B), max(below, default=0.0), len(below)))
    return out


def gradient_energy_certificate(
    metric: Metric,
    region: RegionPair,
    tri: ExponentTriple,
    samples: int,
    seed: int,
) -> tuple[float, float, float]:
    """Fit ||grad u||^2 <= C E(u) + K over random u in B^{q,r}_b(Omega, Sigma).

    Least squares gives C; K is then raised to the smallest value that
    covers every sample.  Returns (C, K, worst violation), the last being
    <= 0 by construction up to rounding.
    """
    rng = np.random.default_rng(seed)
    r = metric.grid.nodes
    G, E = [], []
    for _ in range(samples):
        base = np.abs(_random_shape(rng, r, metric.dims.n)) + 1e-3 * r ** (2 - metric.dims.n)
        try:
            _, ku = project_to_constraint(GridFunction(metric.grid, base), metric, region, tri)
        except ConstraintError:
            continue
        e = energy(metric, region, ku)
        G.append(e.dirichlet)
        E.append(e.total)
    G, E = np.array(G), np.array(E)
    X = np.column_stack([E, np.ones_like(E)])
    (C, K), *_ = np.linalg.lstsq(X, G, rcond=None)
    K += max(0.0, float(np.max(G - C * E - K)))
    viol = float(np.max(G - C * E - K))
    return float(C), float(K), viol
