"""The weighted relative eigenvalue lambda_delta(Omega, Sigma).

lambda_delta = inf E(u) / (||u||^2_{L^2_delta(Omega)} + ||gamma u||^2_{L^2(Sigma)})
is the smallest eigenvalue of the tridiagonal pencil (A, B) restricted to the
free nodes.  The fast path is inverse iteration on the symmetrised matrix
B^(-1/2) A B^(-1/2) using LAPACK's positive-definite tridiagonal routines;
the oracle bisects on Sturm counts of A - lambda B in plain Python.
"""
from __future__ import annotations

import math
from collections.abc import Callable, Sequence
from dataclasses import dataclass

import numpy as np
from scipy.linalg import lapack
from scipy.optimize import brentq

from ._io import csv_text
from .calculus import assemble
from .domain import GridFunction, Metric, RegionPair
from .energy import energy, energy_bands

#: Relative width of the "zero" band in sign classification.
SIGN_TOL = 1e-6


class NonConvergenceError(RuntimeError):
    pass


@dataclass(frozen=True, eq=False)
class InvariantReport:
    value: float
    sign: str
    minimizer: GridFunction | None
    iterations: int
    residual: float
    scale: float = 0.0

    def as_record(self) -> dict:
        return {
            "value": self.value,
            "sign": self.sign,
            "scale": self.scale,
            "iterations": self.iterations,
            "residual": self.residual,
        }


def classify_value(value: float, scale: float) -> str:
    if math.isinf(value) and value > 0:
        return "infinite"
    if abs(value) <= SIGN_TOL * (abs(value) + scale):
        return "zero"
    return "positive" if value > 0 else "negative"


def pencil(metric: Metric, region: RegionPair, delta: float):
    """(a, e, b, idx): A's diagonal/off-diagonal and B's diagonal on the free nodes."""
    asm = assemble(metric)
    n = metric.dims.n
    # node 0 is free exactly when the boundary is, so the H term is kept as is
    diag, off = energy_bands(metric)
    bdiag = asm.omega * asm.W * metric.grid.rho ** (-2 * delta - n)
    if region.boundary_free:
        bdiag = bdiag.copy()
        bdiag[0] += asm.omega * asm.S
    idx = np.flatnonzero(region.free_nodes)
    a = diag[idx]
    e = np.where(np.diff(idx) == 1, off[idx[:-1]], 0.0)
    return a, e, bdiag[idx], idx


def _check_delta(metric: Metric, delta: float) -> None:
    if not delta > metric.dims.delta_star:
        raise ValueError(f"delta must exceed delta* = {metric.dims.delta_star}")


def _inverse_iteration(d: np.ndarray, e: np.ndarray, max_iter: int = 500):
    """Lowest eigenpair of the symmetric tridiagonal (d, e).

    The shift starts at the Gershgorin lower bound minus one and creeps up
    towards the Rayleigh quotient; a failed Cholesky (dpttrf) means the
    shift passed lambda_1 and is refused, so C - sigma stays definite.
    """
    m = d.size
    if m == 1:
        return float(d[0]), np.ones(1), 0, 0.0
    ae = np.abs(e)
    rad = np.zeros(m)
    rad[:-1] += ae
    rad[1:] += ae
    sigma = float(np.min(d - rad)) - 1.0
    x = np.ones(m) / math.sqrt(m)
    mu = float("inf")
    res = float("inf")
    it = 0
    for it in range(1, max_iter + 1):
        df, ef, info = lapack.dpttrf(d - sigma, e)
        if info != 0:
            raise NonConvergenceError("shifted matrix lost definiteness")
        y, info = lapack.dpttrs(df, ef, x)
        x = y / np.linalg.norm(y)
        Cx = d * x
        Cx[:-1] += e * x[1:]
        Cx[1:] += e * x[:-1]
        mu_new = float(x @ Cx)
        rvec = Cx - mu_new * x
        res = float(np.linalg.norm(rvec))
        scale = float(np.linalg.norm(Cx))
        done = res <= 1e-13 * max(scale, abs(mu_new), 1e-300) or (
            abs(mu_new - mu) <= 4e-16 * max(abs(mu_new), 1.0) and res <= 1e-9 * max(scale, 1.0)
        )
        mu = mu_new
        if done:
            break
        trial = sigma + 0.5 * (mu - sigma)
        for _ in range(4):
            if lapack.dpttrf(d - trial, e)[2] == 0:
                sigma = trial
                break
            trial = sigma + 0.5 * (trial - sigma)
    return mu, x, it, res


def lambda_delta(metric: Metric, region: RegionPair, delta: float = 0.0) -> InvariantReport:
    _check_delta(metric, delta)
    grid = metric.grid
    if region.is_trivial:
        return InvariantReport(math.inf, "infinite", None, 0, 0.0, 0.0)
    a, e, b, idx = pencil(metric, region, delta)
    s = 1.0 / np.sqrt(b)
    d = a * s * s
    ee = e * s[:-1] * s[1:]
    mu, y, iters, _ = _inverse_iteration(d, ee)
    x = y * s
    x /= math.sqrt(float(np.sum(b * x * x)))
    if x[np.argmax(np.abs(x))] < 0:
        x = -x
    Ax = a * x
    Ax[:-1] += e * x[1:]
    Ax[1:] += e * x[:-1]
    lam = float(x @ Ax)
    resid = float(np.linalg.norm(Ax - lam * b * x) / max(np.linalg.norm(Ax), 1e-300))
    u = np.zeros(grid.nodes.size)
    u[idx] = x
    parts = energy(metric, region, u)
    return InvariantReport(lam, classify_value(lam, parts.scale), GridFunction(grid, u), iters, resid, parts.scale)


# ---------------------------------------------------------------------------
# oracle


def sturm_count(a: Sequence[float], e: Sequence[float], b: Sequence[float], lam: float) -> int:
    """Number of eigenvalues of the pencil (A, B) below ``lam`` (LDL^T inertia)."""
    count = 0
    piv = 1.0
    tiny = 1e-300
    for i in range(len(a)):
        p = a[i] - lam * b[i]
        if i > 0:
            p -= e[i - 1] * e[i - 1] / piv
        if p == 0.0:
            p = -tiny
        if p < 0:
            count += 1
        piv = p
    return count


def lowest_pencil_eigenvalue(a: Sequence[float], e: Sequence[float], b: Sequence[float]) -> float:
    """Smallest eigenvalue of the symmetric tridiagonal pencil (A, B), B diagonal > 0."""
    a, e, b = list(map(float, a)), list(map(float, e)), list(map(float, b))
    m = len(a)
    lo = min(
        (a[i] - (abs(e[i - 1]) if i > 0 else 0.0) - (abs(e[i]) if i < m - 1 else 0.0)) / b[i]
        for i in range(m)
    )
    hi = min(ai / bi for ai, bi in zip(a, b))
    lo = min(lo, hi) - 1.0
    while sturm_count(a, e, b, hi) < 1:
        hi += max(1.0, abs(hi))
    for _ in range(200):
        mid = 0.5 * (lo + hi)
        if mid in (lo, hi):
            break
        if sturm_count(a, e, b, mid) >= 1:
            hi = mid
        else:
            lo = mid
        if hi - lo <= 1e-15 * max(1.0, abs(hi)):
            break
    return 0.5 * (lo + hi)


def lambda_delta_dense_oracle(metric: Metric, region: RegionPair, delta: float = 0.0) -> float:
    """Smallest pencil eigenvalue by Sturm bisection, for N <= 1000."""
    _check_delta(metric, delta)
    if metric.grid.N > 1000:
        raise ValueError("the oracle is limited to N <= 1000")
    if region.is_trivial:
        return math.inf
    a, e, b, _ = pencil(metric, region, delta)
    return lowest_pencil_eigenvalue(a, e, b)


# ---------------------------------------------------------------------------
# one-parameter families


@dataclass(frozen=True)
class LambdaCurve:
    points: list[tuple[float, float, str]]
    s_star: float | None
    lambda_star: float | None
    scale_star: float | None

    def to_csv(self) -> str:
        return csv_text(["s", "lambda", "sign"], self.points)


def lambda_curve(
    family: Callable[[float], Metric],
    region: RegionPair,
    delta: float,
    s_values: Sequence[float],
) -> LambdaCurve:
    """lambda_delta along a metric family, plus the zero crossing if bracketed."""
    pts = []
    for s in s_values:
        rep = lambda_delta(family(float(s)), region, delta)
        pts.append((float(s), rep.value, rep.sign))
    s_star = lam_star = scale_star = None
    for (s0, l0, _), (s1, l1, _) in zip(pts, pts[1:]):
        if l0 == 0.0:
            s_star = s0
            break
        if np.sign(l0) != np.sign(l1) and np.isfinite(l0) and np.isfinite(l1):
            s_star = find_crossing(family, region, delta, s0, s1)
            break
    if s_star is not None:
        rep = lambda_delta(family(s_star), region, delta)
        lam_star, scale_star = rep.value, rep.scale
    return LambdaCurve(pts, s_star, lam_star, scale_star)


def find_crossing(family, region, delta, s0: float, s1: float) -> float:
    """Root of s -> lambda_delta(family(s)) in [s0, s1] to within SIGN_TOL/10."""

    def lam(s):
        return lambda_delta(family(s), region, delta).value

    s_star = brentq(lam, s0, s1, xtol=1e-15 * max(abs(s0), abs(s1), 1.0), rtol=1e-15, maxiter=200)
    rep = lambda_delta(family(s_star), region, delta)
    if abs(rep.value) > 0.1 * SIGN_TOL * rep.scale:
        raise NonConvergenceError(f"crossing located only to |lambda| = {abs(rep.value):.3g}")
    return float(s_star)
