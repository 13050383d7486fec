"""Solvers for the prescribed scalar and boundary mean curvature problem.

With v = 1 + u the discrete equation on (M, dM) is the row-wise residual
of :func:`energy.curvature_residual`:

    K u + c_n W (R v - R' |v|^(q-2) v)                       (interior rows)
        + d_n S (H v_0 - H' |v_0|^(r-2) v_0)                   (row 0)
        + T u_N                                                (row N)

which is half the gradient of F_{q,r} per unit solid angle.  At the
critical pair (2 qbar, qbar + 1) its solutions are exactly the factors
phi = 1 + u whose read-back curvatures are (R', H').
"""
from __future__ import annotations

import math
from collections.abc import Sequence
from dataclasses import dataclass, field

import numpy as np
from scipy.linalg import LinAlgError, lapack, solve_banded

from .calculus import NormSpec, assemble, l2_delta_sq, weighted_norm
from .conformal import apply_conformal, conformal_curvatures
from .domain import CurvatureTarget, GridFunction, Metric, as_values, zero_set
from .energy import curvature_jacobian_bands, curvature_residual, f_qr
from .normalize import ExponentTriple
from .spectral import NonConvergenceError
from .yamabe import classify_sign


class NonCoerciveError(RuntimeError):
    pass


class OrderingError(RuntimeError):
    pass


@dataclass(frozen=True)
class PrescribeOptions:
    max_newton: int = 100
    tol: float = 1e-8
    max_monotone: int = 500
    continuation_steps: int = 6
    schedule: tuple | None = None
    r_cut: float | None = None
    r_base: float = 2.0
    deltas: tuple = (0.0,)
    readback_factor: float = 10.0
    check_gate: bool = True

    def __post_init__(self):
        if self.max_newton < 1 or self.max_monotone < 1:
            raise ValueError("iteration caps must be >= 1")
        if not self.tol > 0:
            raise ValueError("tol must be positive")


@dataclass(eq=False)
class SolveReport:
    solution: GridFunction | None
    residual_interior: float = math.inf
    residual_boundary: float = math.inf
    ordering_ok: bool = False
    converged: bool = False
    iterations: int = 0
    gate: str = "skipped"
    scale: float = 0.0
    objective: list = field(default_factory=list)
    stages: list = field(default_factory=list)
    failed_stage: int | None = None
    readback: dict | None = None
    reason: str = ""
    metric: Metric | None = None
    ordering_log: list = field(default_factory=list)

    def as_record(self) -> dict:
        rec = {
            "converged": self.converged,
            "gate": self.gate,
            "reason": self.reason,
            "iterations": self.iterations,
            "residual_interior": self.residual_interior,
            "residual_boundary": self.residual_boundary,
            "scale": self.scale,
            "ordering_ok": self.ordering_ok,
            "failed_stage": self.failed_stage,
        }
        if self.solution is not None:
            rec["min_phi"] = float(np.min(1.0 + self.solution.values))
        if self.readback is not None:
            rec["readback"] = self.readback
        if self.stages:
            rec["stages"] = self.stages
        return rec


# ---------------------------------------------------------------------------
# residual bookkeeping


def equation_residuals(metric: Metric, Rp, Hp: float, q: float, r: float, u) -> tuple[float, float, float]:
    """(interior, boundary, scale) for the discrete equation at u.

    The interior residual is the L^2_0 norm of the rows divided by their
    volume weights (a pointwise PDE residual); the boundary residual is row
    0 divided by the boundary area factor.  The scale is the same pair of
    measures applied to the sum of absolute values of every term.
    """
    asm = assemble(metric)
    c_n, d_n = metric.dims.c_n, metric.dims.d_n
    grid = metric.grid
    uu = as_values(u)
    v = uu + 1.0
    Rp = as_values(Rp) * np.ones_like(v)
    G = curvature_residual(metric, Rp, Hp, q, r, uu)
    flux = np.abs(asm.k * np.diff(uu))
    mag = np.zeros_like(v)
    mag[:-1] += flux
    mag[1:] += flux
    mag += c_n * asm.W * (np.abs(metric.R * v) + np.abs(Rp) * np.abs(v) ** (q - 1))
    mag[-1] += asm.T * abs(uu[-1])
    bmag = d_n * asm.S * (abs(metric.H * v[0]) + abs(Hp) * abs(v[0]) ** (r - 1))
    res_i = np.zeros_like(v)
    res_i[1:] = G[1:] / asm.W[1:]
    sc_i = np.zeros_like(v)
    sc_i[1:] = mag[1:] / asm.W[1:]
    ri = math.sqrt(l2_delta_sq(grid, res_i, 0.0))
    si = math.sqrt(l2_delta_sq(grid, sc_i, 0.0))
    rb = abs(G[0]) / asm.S
    sb = (mag[0] + bmag) / asm.S
    return ri, rb, si + sb


def _target(metric: Metric, Rp, Hp) -> CurvatureTarget:
    return CurvatureTarget(as_values(Rp) * np.ones_like(metric.grid.nodes), Hp)


def readback_check(metric: Metric, target: CurvatureTarget, u, factor: float = 10.0) -> dict:
    """Compare conformal_curvatures(metric, 1+u) with the target.

    Passes when both errors are within factor * h^2 * scale, with h the
    largest log-step and scale = 1 + ||R'||_{L^2_0} + |H'|.
    """
    grid = metric.grid
    got = conformal_curvatures(metric, 1.0 + as_values(u))
    err_R = math.sqrt(l2_delta_sq(grid, got.Rp - target.Rp, 0.0))
    err_H = abs(got.Hp - target.Hp)
    scale = 1.0 + math.sqrt(l2_delta_sq(grid, target.Rp, 0.0)) + abs(target.Hp)
    tol = factor * grid.log_step**2 * scale
    return {
        "error_R": err_R,
        "error_H": err_H,
        "tolerance": tol,
        "passed": bool(err_R <= tol and err_H <= tol),
        "R_readback": got.Rp,
        "H_readback": got.Hp,
    }


def _public_readback(rb: dict) -> dict:
    return {k: rb[k] for k in ("error_R", "error_H", "tolerance", "passed", "H_readback")}


# ---------------------------------------------------------------------------
# linear Robin problems


def solve_linear_robin(metric: Metric, c, d: float, f, h: float, waive: bool = False) -> GridFunction:
    """Solve -Lap_g u + c u = f, d_nu u + d u = h at r = 1, u -> 0 at infinity."""
    asm = assemble(metric)
    N1 = metric.grid.nodes.size
    c = as_values(c) * np.ones(N1)
    f = as_values(f) * np.ones(N1)
    if not waive and (np.any(c < 0) or d < 0):
        raise ValueError("need c >= 0 and d >= 0 (or waive=True)")
    diag, off = asm.stiffness_bands()
    diag = diag + asm.W * c
    diag[0] += asm.S * d
    diag[-1] += asm.T
    rhs = asm.W * f
    rhs[0] += asm.S * h
    ab = np.zeros((3, N1))
    ab[0, 1:] = off
    ab[1] = diag
    ab[2, :-1] = off
    try:
        u = solve_banded((1, 1), ab, rhs)
    except (LinAlgError, ValueError) as exc:
        raise NonCoerciveError(f"non-coercive system: {exc}") from None
    Au = diag * u
    Au[:-1] += off * u[1:]
    Au[1:] += off * u[:-1]
    scale = float(np.max(np.abs(diag * u)) + np.max(np.abs(rhs)) + np.max(np.abs(off)) * np.max(np.abs(u)))
    if not np.all(np.isfinite(u)) or np.max(np.abs(Au - rhs)) > 1e-10 * max(scale, 1e-300):
        raise NonCoerciveError("non-coercive system: residual check failed")
    return GridFunction(metric.grid, u)


# ---------------------------------------------------------------------------
# damped Newton on F_{q,r}


def _tridiag_solve_pd(diag: np.ndarray, off: np.ndarray, rhs: np.ndarray, shift_weight: np.ndarray):
    """Solve (J + mu D) x = rhs with the smallest mu in {0, 1e-8, ...} keeping it definite."""
    mu = 0.0
    scale = float(np.max(np.abs(diag)))
    for _ in range(80):
        df, ef, info = lapack.dpttrf(diag + mu * shift_weight, off)
        if info == 0:
            x, info = lapack.dpttrs(df, ef, rhs)
            if info == 0 and np.all(np.isfinite(x)):
                return x, mu
        mu = max(2.0 * mu, 1e-8 * scale / max(float(np.max(shift_weight)), 1e-300))
    raise NonConvergenceError("could not regularise the Newton matrix")


def _newton(
    metric: Metric,
    Rp,
    Hp: float,
    q: float,
    r: float,
    u0,
    opts: PrescribeOptions,
) -> SolveReport:
    """Damped Newton on F_{q,r}, keeping 1 + u >= 0.01 min(1 + u)."""
    target = _target(metric, Rp, Hp)
    tri = ExponentTriple(q, r)
    asm = assemble(metric)
    u = np.array(as_values(u0), dtype=float)
    F = f_qr(metric, target, tri, u)
    history = [F]
    ri, rb, scale = equation_residuals(metric, target.Rp, Hp, q, r, u)
    converged = ri <= opts.tol * scale and rb <= opts.tol * scale
    # past the tolerance, keep refining while Newton still gains a factor of 4
    refine = not converged or ri + rb > 1e-14 * scale
    it = 0
    while refine and it < opts.max_newton:
        it += 1
        G = curvature_residual(metric, target.Rp, Hp, q, r, u)
        diag, off = curvature_jacobian_bands(metric, target.Rp, Hp, q, r, u)
        d, _ = _tridiag_solve_pd(diag, off, -G, asm.W + asm.S * (np.arange(u.size) == 0))
        slope = 2.0 * asm.omega * float(G @ d)
        floor = 0.01 * float(np.min(1.0 + u))
        t = 1.0
        accepted = False
        for _ in range(40):
            trial = u + t * d
            if np.min(1.0 + trial) >= floor:
                Ft = f_qr(metric, target, tri, trial)
                if Ft <= F + 1e-4 * t * slope:
                    accepted = True
                    break
                # rounding floor: F is flat to machine precision near the minimiser
                if Ft <= F + 1e-14 * max(abs(F), 1.0):
                    ri_t, rb_t, _ = equation_residuals(metric, target.Rp, Hp, q, r, trial)
                    if ri_t + rb_t < ri + rb:
                        accepted = True
                        break
            t *= 0.5
        if not accepted:
            break
        u, F = trial, Ft
        history.append(F)
        prev = ri + rb
        ri, rb, scale = equation_residuals(metric, target.Rp, Hp, q, r, u)
        converged = ri <= opts.tol * scale and rb <= opts.tol * scale
        refine = not converged or (ri + rb > 1e-14 * scale and ri + rb < 0.25 * prev)
    return SolveReport(
        solution=GridFunction(metric.grid, u),
        residual_interior=ri,
        residual_boundary=rb,
        ordering_ok=bool(np.min(1.0 + u) > 0),
        converged=bool(converged),
        iterations=it,
        scale=scale,
        objective=history,
    )


def _check_target_signs(target: CurvatureTarget) -> None:
    if not target.is_nonpositive:
        raise ValueError("targets must satisfy R' <= 0 and H' <= 0")


def _gate(metric: Metric, target: CurvatureTarget, deltas) -> tuple[str, str]:
    """(gate, reason) from the sign of the zero-set pair."""
    sign = classify_sign(metric, zero_set(target, metric.grid), deltas)
    if sign == "positive":
        return "passed", ""
    if sign == "zero":
        return "failed", "zero-within-tolerance"
    return "failed", "negative"


def minimize_subcritical(
    metric: Metric,
    target: CurvatureTarget,
    q: float,
    r: float,
    opts: PrescribeOptions | None = None,
    u0=None,
) -> SolveReport:
    """Minimiser of F_{q,r} for subcritical 2 <= r < q < 2 qbar, r < qbar + 1."""
    opts = opts or PrescribeOptions()
    _check_target_signs(target)
    qc, rc = metric.dims.critical_pair
    if not (2 <= r < q < qc and r < rc):
        raise ValueError(f"(q, r) = ({q}, {r}) is not subcritical")
    gate = "skipped"
    if opts.check_gate:
        gate, reason = _gate(metric, target, opts.deltas)
        if gate == "failed":
            return SolveReport(None, gate=gate, reason=reason)
    u0 = np.zeros_like(metric.grid.nodes) if u0 is None else as_values(u0)
    rep = _newton(metric, target.Rp, target.Hp, q, r, u0, opts)
    rep.gate = gate
    return rep


def default_schedule(metric: Metric, steps: int = 6) -> list[tuple[float, float]]:
    """Geometric path from (2 + (2qbar-2)/4, 2 + (qbar-1)/4) to the critical pair."""
    qc, rc = metric.dims.critical_pair
    q0 = 2 + (qc - 2) / 4
    r0 = 2 + (rc - 2) / 4
    if steps < 2:
        return [(qc, rc)]
    out = []
    for k in range(steps):
        s = k / (steps - 1)
        out.append((q0 * (qc / q0) ** s, r0 * (rc / r0) ** s))
    out[-1] = (qc, rc)
    return out


def _check_schedule(metric: Metric, schedule) -> list[tuple[float, float]]:
    sched = [(float(q), float(r)) for q, r in schedule]
    if not sched:
        raise ValueError("empty schedule")
    qc, rc = metric.dims.critical_pair
    if abs(sched[-1][0] - qc) > 1e-12 or abs(sched[-1][1] - rc) > 1e-12:
        raise ValueError("the schedule must end at the critical pair")
    sched[-1] = (qc, rc)
    for (q0, r0), (q1, r1) in zip(sched, sched[1:]):
        if not (q1 > q0 and r1 > r0):
            raise ValueError("the schedule must increase strictly in q and r")
    for q, r in sched[:-1]:
        if not (2 <= r < q):
            raise ValueError(f"schedule entry ({q}, {r}) needs 2 <= r < q")
    return sched


def continuation_to_critical(
    metric: Metric,
    target: CurvatureTarget,
    schedule: Sequence | None = None,
    opts: PrescribeOptions | None = None,
    u0=None,
) -> SolveReport:
    """Warm-started chain of minimisations ending at the critical exponents."""
    opts = opts or PrescribeOptions()
    _check_target_signs(target)
    sched = _check_schedule(metric, schedule or opts.schedule or default_schedule(metric, opts.continuation_steps))
    gate = "skipped"
    if opts.check_gate:
        gate, reason = _gate(metric, target, opts.deltas)
        if gate == "failed":
            return SolveReport(None, gate=gate, reason=reason)
    u = np.zeros_like(metric.grid.nodes) if u0 is None else np.array(as_values(u0), dtype=float)
    spec = NormSpec(1, 2.0, metric.dims.delta_star)
    stages = []
    total = 0
    rep = None
    for idx, (q, r) in enumerate(sched):
        rep = _newton(metric, target.Rp, target.Hp, q, r, u, opts)
        total += rep.iterations
        norm = weighted_norm(rep.solution, spec)
        stages.append(
            {
                "stage": idx,
                "q": q,
                "r": r,
                "converged": rep.converged,
                "iterations": rep.iterations,
                "residual_interior": rep.residual_interior,
                "residual_boundary": rep.residual_boundary,
                "norm_W12": norm,
            }
        )
        if not rep.converged:
            rep.failed_stage = idx
            rep.reason = f"stage {idx} at (q, r) = ({q:.6g}, {r:.6g}) did not converge"
            break
        u = rep.solution.values
    rep.stages = stages
    rep.iterations = total
    rep.gate = gate
    return rep


# ---------------------------------------------------------------------------
# monotone iteration between barriers


def _monotone_slopes(metric: Metric, Rt: np.ndarray, Ht: float, u: np.ndarray, v: np.ndarray):
    """Nonnegative slopes gamma with N(s) + gamma s nondecreasing on [v, u].

    N(s) = c_n (Rt (1+s)^(2qbar-1) - R (1+s)) is concave in s where Rt <= 0,
    so its steepest descent on [v, u] is at u; elsewhere it is at v.
    """
    dims = metric.dims
    p = dims.two_qbar
    s = np.where(Rt <= 0, u, v)
    gam = np.maximum(0.0, dims.c_n * (metric.R - (p - 1) * Rt * (1.0 + s) ** (p - 2)))
    sb = u[0] if Ht <= 0 else v[0]
    qb = dims.qbar
    gam_b = max(0.0, dims.d_n * (metric.H - qb * Ht * (1.0 + sb) ** (qb - 1)))
    return gam, gam_b


def reduce_curvature(
    metric: Metric,
    Rt,
    Ht: float,
    opts: PrescribeOptions | None = None,
) -> tuple[SolveReport, Metric]:
    """Conformal factor 1 + u, -1 < u <= 0, lowering (R, H) to (Rt, Ht).

    The subsolution v solves the linear problem with coefficients R - min(0, Rt)
    and H - min(0, Ht); the supersolution is 0.  Each iterate solves
    (K + W gamma + S gamma_b + T) (u^k - u^(k+1)) = G(u^k) with slopes making
    the scheme order preserving, so v <= u^(k+1) <= u^k <= 0 throughout.
    """
    opts = opts or PrescribeOptions()
    dims = metric.dims
    grid = metric.grid
    Rt = as_values(Rt) * np.ones_like(grid.nodes)
    Ht = float(Ht)
    if np.any(Rt > metric.R) or Ht > metric.H:
        raise ValueError("reduce_curvature needs Rt <= R and Ht <= H")
    asm = assemble(metric)
    q, r = dims.critical_pair
    c = dims.c_n * (metric.R - np.minimum(0.0, Rt))
    d = dims.d_n * (metric.H - min(0.0, Ht))
    v = solve_linear_robin(metric, c, d, -c, -d).values
    u = np.zeros_like(v)
    log = []
    ri, rb, scale = equation_residuals(metric, Rt, Ht, q, r, u)
    converged = ri <= opts.tol * scale and rb <= opts.tol * scale
    ordering_ok = bool(np.min(1.0 + v) > 0 and np.max(v) <= 1e-12)
    if not ordering_ok:
        raise OrderingError("subsolution left (-1, 0]: the grid is too coarse")
    kdiag, off = asm.stiffness_bands()
    it = 0
    stall = 0
    refine = not converged
    while refine and it < opts.max_monotone:
        it += 1
        G = curvature_residual(metric, Rt, Ht, q, r, u)
        gam, gam_b = _monotone_slopes(metric, Rt, Ht, u, v)
        diag = kdiag + asm.W * gam
        diag[0] += asm.S * gam_b
        diag[-1] += asm.T
        df, ef, info = lapack.dpttrf(diag, off)
        if info != 0:
            raise NonConvergenceError("monotone iteration matrix lost definiteness")
        step, _ = lapack.dpttrs(df, ef, G)
        new = u - step
        dec = float(np.min(u - new))
        above = float(np.min(new - v))
        top = float(np.max(new))
        log.append((dec, above, top))
        if dec < -1e-12 or above < -1e-12 or top > 1e-12:
            raise OrderingError(
                f"ordering violated at iterate {it}: min(u^k - u^(k+1)) = {dec:.3g}, "
                f"min(u^(k+1) - v) = {above:.3g}, max u^(k+1) = {top:.3g}"
            )
        u = new
        prev = ri + rb
        ri, rb, scale = equation_residuals(metric, Rt, Ht, q, r, u)
        converged = ri <= opts.tol * scale and rb <= opts.tol * scale
        stall = stall + 1 if ri + rb >= prev else 0
        if stall >= 5:
            break
        refine = not converged or (ri + rb > 1e-14 * scale and ri + rb < 0.5 * prev)
    sol = GridFunction(grid, u)
    report = SolveReport(
        solution=sol,
        residual_interior=ri,
        residual_boundary=rb,
        ordering_ok=bool(np.min(1.0 + u) > 0 and np.all(u <= 1e-12) and np.all(u - v >= -1e-12)),
        converged=bool(converged),
        iterations=it,
        scale=scale,
        ordering_log=log,
    )
    report.stages = [{"stage": "subsolution", "min_v": float(np.min(v))}]
    rb_check = readback_check(metric, _target(metric, Rt, Ht), u, opts.readback_factor)
    report.readback = _public_readback(rb_check)
    new_metric = apply_conformal(metric, 1.0 + u) if np.any(u != 0) else metric
    report.metric = new_metric
    return report, new_metric


# ---------------------------------------------------------------------------
# compact support and the full pipeline


def cutoff(grid, r_cut: float) -> np.ndarray:
    """Nodal step 1[r <= r_cut]; its piecewise linear interpolant ramps over one cell."""
    return (grid.nodes <= r_cut * (1 + 1e-14)).astype(float)


def _certified(metric: Metric, u: np.ndarray, Rp: np.ndarray, Hp: float, factor: float, what: str) -> Metric:
    """phi (1 + u) with the curvature fields set to the target, after read-back."""
    chk = readback_check(metric, _target(metric, Rp, Hp), u, factor)
    if not chk["passed"]:
        raise NonConvergenceError(
            f"{what}: read-back off by ({chk['error_R']:.3g}, {chk['error_H']:.3g}) > {chk['tolerance']:.3g}"
        )
    return Metric(metric.grid, metric.phi * (1.0 + u), Rp, Hp, metric.tau)


def _homotopy_solve(metric: Metric, R_to, H_to: float, opts: PrescribeOptions) -> np.ndarray:
    """Critical-exponent solve for (R_to, H_to) by continuation from (R, H)."""
    q, r = metric.dims.critical_pair
    u = np.zeros_like(metric.grid.nodes)
    t, dt = 0.0, 1.0
    while t < 1.0:
        t1 = min(1.0, t + dt)
        Rs = metric.R + t1 * (R_to - metric.R)
        Hs = metric.H + t1 * (H_to - metric.H)
        rep = _newton(metric, Rs, Hs, q, r, u, opts)
        if rep.converged and rep.ordering_ok:
            u, t = rep.solution.values, t1
            dt = min(1.0, 2 * dt)
        else:
            dt *= 0.5
            if dt < 1e-4:
                raise NonConvergenceError(f"homotopy stalled at t = {t:.6g}")
    return u


def flatten_ends(metric: Metric, r_cut: float, opts: PrescribeOptions | None = None) -> Metric:
    """Conformal metric with R replaced by R * 1[r <= r_cut] and the same H."""
    opts = opts or PrescribeOptions()
    grid = metric.grid
    if not 1 < r_cut < grid.R_max:
        raise ValueError("need 1 < r_cut < R_max")
    R_to = metric.R * cutoff(grid, r_cut)
    if np.array_equal(R_to, metric.R):
        return metric
    u = _homotopy_solve(metric, R_to, metric.H, opts)
    return _certified(metric, u, R_to, metric.H, opts.readback_factor, "flatten_ends")


def _chi_search(metric: Metric, target: CurvatureTarget, opts: PrescribeOptions):
    """Smallest k with the zero-set pair of chi_k R' Yamabe positive."""
    grid = metric.grid
    k = 0
    while True:
        r_k = opts.r_base * 2.0**k
        if r_k >= grid.R_max:
            return None, target, k
        Rk = target.Rp * cutoff(grid, r_k)
        tk = CurvatureTarget(Rk, target.Hp, target.zero_tol)
        if classify_sign(metric, zero_set(tk, grid), opts.deltas) == "positive":
            return r_k, tk, k
        k += 1


def prescribe_pipeline(
    metric: Metric,
    target: CurvatureTarget,
    opts: PrescribeOptions | None = None,
) -> SolveReport:
    """Gate, flatten, truncate, continue to critical, reduce, polish, verify."""
    opts = opts or PrescribeOptions()
    _check_target_signs(target)
    grid = metric.grid
    stages: list[dict] = []

    def fail(idx: int, reason: str, gate: str = "passed") -> SolveReport:
        return SolveReport(None, gate=gate, reason=reason, stages=stages, failed_stage=idx)

    Z = zero_set(target, grid)
    gate, reason = _gate(metric, target, opts.deltas)
    stages.append({"stage": "gate", "omega_nodes": int(Z.omega_mask.sum()), "sigma": Z.sigma_included, "gate": gate})
    if gate == "failed":
        return SolveReport(None, gate=gate, reason=reason, stages=stages)

    try:
        r_cut = opts.r_cut or math.sqrt(grid.R_max)
        g1 = flatten_ends(metric, r_cut, opts)
        stages.append({"stage": "flatten_ends", "r_cut": r_cut, "changed": g1 is not metric})

        r_k, tk, k = _chi_search(g1, target, opts)
        stages.append({"stage": "truncate", "k": k, "r_k": r_k})

        inner = PrescribeOptions(**{**opts.__dict__, "check_gate": False})
        cont = continuation_to_critical(g1, tk, None, inner)
        stages.append({"stage": "continuation", "converged": cont.converged, "stages": cont.stages})
        if not cont.converged:
            return fail(3, cont.reason or "continuation failed")
        g2 = _certified(g1, cont.solution.values, tk.Rp, tk.Hp, opts.readback_factor, "continuation")

        red, g3 = reduce_curvature(g2, target.Rp, target.Hp, inner)
        stages.append(
            {"stage": "reduce_curvature", "converged": red.converged, "iterations": red.iterations, "ordering_ok": red.ordering_ok}
        )
        if not (red.converged and red.ordering_ok):
            return fail(4, "curvature reduction did not converge")
    except (NonConvergenceError, OrderingError, NonCoerciveError) as exc:
        return fail(len(stages), str(exc))

    q, r = metric.dims.critical_pair
    u0 = g3.phi / metric.phi - 1.0
    final = _newton(metric, target.Rp, target.Hp, q, r, u0, opts)
    stages.append({"stage": "polish", "converged": final.converged, "iterations": final.iterations})
    rb = readback_check(metric, target, final.solution.values, opts.readback_factor)
    stages.append({"stage": "readback", **_public_readback(rb)})
    final.readback = _public_readback(rb)
    final.stages = stages
    final.gate = gate
    final.converged = bool(final.converged and final.ordering_ok and rb["passed"])
    if not final.converged:
        final.failed_stage = len(stages) - 1
        final.reason = "final solve or read-back failed"
    else:
        final.metric = Metric(grid, metric.phi * (1.0 + final.solution.values), rb["R_readback"], rb["H_readback"], metric.tau)
    return final
