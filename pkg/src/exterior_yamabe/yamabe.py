"""Relative Yamabe invariants Y^{q,r}_b(Omega, Sigma) and their sign.

The infimum of E over B^{q,r}_b is searched by projected gradient descent:
each step moves along the Sobolev-preconditioned tangential gradient and
rescales back onto the constraint.  Only the sign of the result is
meaningful at critical exponents (the infimum need not be attained).
"""
from __future__ import annotations

import math
from collections.abc import Sequence
from dataclasses import dataclass, replace

import numpy as np
from scipy.linalg import solve_banded

from ._io import csv_text
from .calculus import assemble
from .domain import GridFunction, Metric, RegionPair, as_values
from .energy import energy, energy_gradient
from .normalize import ConstraintError, ExponentTriple, project_to_constraint
from .spectral import InvariantReport, classify_value, lambda_delta


class SignInconsistencyError(RuntimeError):
    pass


@dataclass(frozen=True)
class YamabeOptions:
    max_iters: int = 2000
    step0: float = 1.0
    tol_grad: float = 1e-9
    restarts: int = 4
    seed: int = 0

    def __post_init__(self):
        if self.max_iters < 1:
            raise ValueError("max_iters must be >= 1")
        if not self.tol_grad > 0:
            raise ValueError("tol_grad must be positive")


def _check_exponents(metric: Metric, tri: ExponentTriple) -> None:
    qc, rc = metric.dims.critical_pair
    eps = 1e-12
    if not (2 - eps <= tri.q <= qc + eps and 2 - eps <= tri.r <= rc + eps):
        raise ValueError(f"exponents (q, r) = ({tri.q}, {tri.r}) outside [2, {qc}] x [2, {rc}]")


def default_starts(metric: Metric, region: RegionPair, opts: YamabeOptions) -> list[np.ndarray]:
    """Constant, 1/r-type decay, a bump in the longest run of Omega, random."""
    grid = metric.grid
    r = grid.nodes
    n = metric.dims.n
    free = region.free_nodes.astype(float)
    starts = [free.copy(), free * r ** (2 - n)]
    runs = region.index_ranges()
    i, j = max(runs, key=lambda ij: ij[1] - ij[0])
    bump = np.zeros_like(r)
    if j > i:
        t = (np.log(r[i : j + 1]) - math.log(r[i])) / (math.log(r[j]) - math.log(r[i]))
        bump[i : j + 1] = np.sin(np.pi * t) + 1e-3
    else:
        bump[i] = 1.0
    starts.append(bump * free)
    rng = np.random.default_rng(opts.seed)
    noise = np.abs(rng.normal(size=r.size)) * r ** (2 - n)
    starts.append(np.convolve(noise, np.ones(5) / 5, mode="same") * free)
    return [s for s in starts[: max(opts.restarts, 1)] if np.any(s != 0)]


class _Problem:
    """E restricted to B^{q,r}_b(Omega, Sigma) with a fixed preconditioner."""

    def __init__(self, metric: Metric, region: RegionPair, tri: ExponentTriple):
        self.metric, self.region, self.tri = metric, region, tri
        asm = assemble(metric)
        self.asm = asm
        self.free = region.free_nodes
        self.idx = np.flatnonzero(self.free)
        diag, off = asm.stiffness_bands()
        diag = diag + asm.W * metric.grid.rho ** -2.0
        diag[-1] += asm.T
        d = diag[self.idx]
        e = np.where(np.diff(self.idx) == 1, off[self.idx[:-1]], 0.0)
        ab = np.zeros((3, d.size))
        ab[0, 1:] = e
        ab[1] = d
        ab[2, :-1] = e
        self.ab = ab

    def project(self, u: np.ndarray) -> np.ndarray:
        _, ku = project_to_constraint(GridFunction(self.metric.grid, np.abs(u)), self.metric, self.region, self.tri)
        return ku.values.copy()

    def value(self, u: np.ndarray) -> float:
        return energy(self.metric, self.region, u).total

    def tangent_gradient(self, u: np.ndarray, E: float) -> np.ndarray:
        """Gradient of u -> E(k(u) u) at a point with k(u) = 1."""
        q, r, b = self.tri.q, self.tri.r, self.tri.b
        asm = self.asm
        gE = energy_gradient(self.metric, self.region, u).values
        v = np.where(self.free, u, 0.0)
        gA = asm.omega * q * asm.W * np.abs(v) ** (q - 1) * np.sign(v)
        A = asm.omega * float(np.sum(asm.W * np.abs(v) ** q))
        C = 0.0
        gC = np.zeros_like(v)
        if self.region.boundary_free:
            C = asm.omega * asm.S * abs(v[0]) ** r
            gC[0] = asm.omega * asm.S * r * abs(v[0]) ** (r - 1) * np.sign(v[0])
        denom = q * A + b * r * C
        return np.where(self.free, gE - 2.0 * E * (gA + b * gC) / denom, 0.0)

    def precondition(self, g: np.ndarray) -> np.ndarray:
        out = np.zeros_like(g)
        out[self.idx] = solve_banded((1, 1), self.ab, g[self.idx])
        return out


def _descend(prob: _Problem, u0: np.ndarray, opts: YamabeOptions):
    u = prob.project(u0)
    E = prob.value(u)
    t = opts.step0
    it = 0
    slope = math.inf
    for it in range(1, opts.max_iters + 1):
        g = prob.tangent_gradient(u, E)
        d = prob.precondition(g)
        slope = float(g @ d)
        size = math.sqrt(max(float(np.sum(prob.asm.W * u * u)), 1e-300))
        if slope <= (opts.tol_grad * max(abs(E), 1e-300)) ** 2:
            break
        dnorm = math.sqrt(max(float(np.sum(prob.asm.W * d * d)), 1e-300))
        t = min(t, 0.5 * size / dnorm)
        accepted = False
        for _ in range(40):
            try:
                trial = prob.project(u - t * d)
            except ConstraintError:
                t *= 0.5
                continue
            Et = prob.value(trial)
            if Et <= E - 1e-4 * t * slope:
                accepted = True
                break
            t *= 0.5
        if not accepted:
            break
        if E - Et <= 1e-15 * max(abs(E), 1e-300):
            u, E = trial, Et
            break
        u, E = trial, Et
        t *= 2.0
    return u, E, it, math.sqrt(max(slope, 0.0))


def yamabe_infimum(
    metric: Metric,
    region: RegionPair,
    tri: ExponentTriple,
    opts: YamabeOptions | None = None,
    starts: Sequence | None = None,
) -> InvariantReport:
    """Upper bound for Y^{q,r}_b(Omega, Sigma) from the best of several descents."""
    opts = opts or YamabeOptions()
    _check_exponents(metric, tri)
    if region.is_trivial:
        return InvariantReport(math.inf, "infinite", None, 0, 0.0, 0.0)
    prob = _Problem(metric, region, tri)
    if starts is None:
        starts = default_starts(metric, region, opts)
    best = None
    total_iters = 0
    for s in starts:
        s = region.mask_values(as_values(s))
        if not np.any(s):
            continue
        try:
            u, E, it, gnorm = _descend(prob, s, opts)
        except ConstraintError:
            continue
        total_iters += it
        if best is None or E < best[1]:
            best = (u, E, gnorm)
    if best is None:
        raise ConstraintError("constraint unsatisfiable from every start")
    u, E, gnorm = best
    scale = energy(metric, region, u).scale
    return InvariantReport(E, classify_value(E, scale), GridFunction(metric.grid, u), total_iters, gnorm, scale)


def classify_sign(metric: Metric, region: RegionPair, delta_list: Sequence[float] = (0.0,)) -> str:
    """Common sign of lambda_delta over ``delta_list``; +inf counts as positive."""
    delta_list = list(delta_list)
    if not delta_list:
        raise ValueError("delta_list must not be empty")
    signs = set()
    for delta in delta_list:
        s = lambda_delta(metric, region, delta).sign
        signs.add("positive" if s == "infinite" else s)
    if len(signs) != 1:
        raise SignInconsistencyError(f"sign inconsistency across delta = {delta_list}: {sorted(signs)}")
    return signs.pop()


@dataclass(frozen=True)
class SignTable:
    rows: list[tuple[float, float, float, str]]
    all_equal: bool

    def to_csv(self) -> str:
        return csv_text(["b", "r", "value_upper_bound", "sign"], self.rows)


def sign_independence_suite(
    metric: Metric,
    region: RegionPair,
    b_list: Sequence[float],
    r_list: Sequence[float],
    opts: YamabeOptions | None = None,
) -> SignTable:
    """Sign of Y^{2qbar, r}_b for every (b, r); q is the critical interior exponent."""
    q = metric.dims.two_qbar
    rows = []
    for b in b_list:
        for r in r_list:
            rep = yamabe_infimum(metric, region, ExponentTriple(q, float(r), float(b)), opts)
            rows.append((float(b), float(r), rep.value, rep.sign))
    signs = {("positive" if s == "infinite" else s) for *_, s in rows}
    return SignTable(rows, len(signs) <= 1)


def conformal_energy_identity(metric: Metric, phi, u) -> tuple[float, float]:
    """(E_{g'}(u), E_g(phi u)) on (M, dM) with g' = phi^(4/(n-2)) g."""
    from .conformal import apply_conformal
    from .domain import full_region

    ph = as_values(phi)
    v = as_values(u)
    g2 = apply_conformal(metric, ph)
    full = full_region(metric.grid)
    return energy(g2, full, v).total, energy(metric, full, ph * v).total


def conformal_invariance_check(
    metric: Metric,
    region: RegionPair,
    phi,
    r: float,
    opts: YamabeOptions | None = None,
) -> tuple[float, float, float]:
    """Discrete Y^{2qbar, r}_0 under g and under phi^(4/(n-2)) g.

    The second minimisation runs over the mapped starts u / phi, mirroring
    the correspondence u in B(g') <=> phi u in B(g).
    """
    from .conformal import apply_conformal

    opts = opts or YamabeOptions()
    ph = as_values(phi)
    if np.any(ph <= 0):
        raise ValueError("conformal factor must be positive")
    tri = ExponentTriple(metric.dims.two_qbar, r, 0.0)
    starts = default_starts(metric, region, opts)
    g2 = apply_conformal(metric, ph)
    v1 = yamabe_infimum(metric, region, tri, opts, starts).value
    v2 = yamabe_infimum(g2, region, tri, opts, [s / ph for s in starts]).value
    denom = max(abs(v1), abs(v2))
    rel = abs(v1 - v2) / denom if denom > 0 else 0.0
    return v1, v2, rel


def with_seed(opts: YamabeOptions, seed: int) -> YamabeOptions:
    return replace(opts, seed=seed)
