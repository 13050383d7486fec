"""Normalisation onto the constraint sets ||u||_q^q + b ||gamma u||_r^r = 1."""
from __future__ import annotations

import math
from dataclasses import dataclass

from .calculus import lebesgue_norm_p, trace_norm_p
from .domain import GridFunction, Metric, RegionPair


class ConstraintError(ValueError):
    pass


@dataclass(frozen=True)
class ExponentTriple:
    q: float
    r: float
    b: float = 1.0

    def __post_init__(self):
        if not (self.q >= self.r > 1):
            raise ValueError(f"need q >= r > 1, got q={self.q}, r={self.r}")


def unit_root(a: float, b: float, q: float, r: float) -> float:
    """Positive root of a x^q + b x^r = 1.

    Bracketed Newton with bisection fallback.  On the bracket f - 1 changes
    sign exactly once; Newton steps that leave the bracket or meet a
    non-positive slope are replaced by bisection.
    """
    if not a > 0:
        raise ValueError("a must be positive")
    if q == r:
        if b <= -a:
            raise ConstraintError("q = r with b <= -a has no positive root")
        return (a + b) ** (-1.0 / q)
    if not q > r > 1:
        raise ValueError(f"need q > r > 1, got q={q}, r={r}")

    def g(x):
        return a * x**q + b * x**r - 1.0

    # when b < 0 and q - r is tiny the terms a x^q, b x^r at the root overflow
    log_far = math.log(-b / a) / (q - r) if b < 0 else -math.inf
    if max(log_far, -math.log(a) / q) * max(q, 1.0) > 700.0:
        raise ConstraintError("the terms at the root exceed the floating-point range")
    lo = 0.0
    hi = (1.0 / a) ** (1.0 / q) + max(0.0, -b / a) ** (1.0 / (q - r)) + 1.0
    while g(hi) < 0:
        lo, hi = hi, 2.0 * hi
    x = hi
    gx = g(x)
    best, best_res = x, abs(gx)
    for _ in range(400):
        if best_res <= 1e-13:
            break
        slope = q * a * x ** (q - 1) + r * b * x ** (r - 1)
        xn = x - gx / slope if slope > 0 else lo - 1.0
        if not (lo < xn < hi):
            xn = 0.5 * (lo + hi)
        if xn == x:
            break
        x = xn
        gx = g(x)
        if gx < 0:
            lo = x
        else:
            hi = x
        if abs(gx) < best_res:
            best, best_res = x, abs(gx)
        if hi - lo <= 4 * math.ulp(hi):
            break
    return best


def project_to_constraint(
    u: GridFunction,
    metric: Metric,
    region: RegionPair,
    tri: ExponentTriple,
) -> tuple[float, GridFunction]:
    """Scale u (masked to (Omega, Sigma)) onto B^{q,r}_b; returns (k, k*u)."""
    v = region.mask_values(u)
    a = lebesgue_norm_p(metric, region, v, tri.q)
    if a == 0.0:
        raise ConstraintError("trivial function: u vanishes on Omega")
    c = trace_norm_p(metric, region, v, tri.r)
    bc = tri.b * c
    try:
        if bc == 0.0:
            k = a ** (-1.0 / tri.q)
        else:
            k = unit_root(a, bc, tri.q, tri.r)
    except ConstraintError as exc:
        raise ConstraintError(f"constraint unsatisfiable: {exc}") from None
    return k, GridFunction(metric.grid, k * v)


def constraint_value(metric: Metric, region: RegionPair, u, tri: ExponentTriple) -> float:
    return lebesgue_norm_p(metric, region, u, tri.q) + tri.b * trace_norm_p(metric, region, u, tri.r)
