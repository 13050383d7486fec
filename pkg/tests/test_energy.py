import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from exterior_yamabe.domain import (
    CurvatureTarget,
    build_grid,
    flat_metric,
    full_region,
    region_from_intervals,
    well_metric,
)
from exterior_yamabe.energy import (
    coupled_norm,
    energy,
    energy_gradient,
    f_qr,
    f_qr_gradient,
    gradient_energy_certificate,
    probe_coercivity,
)
from exterior_yamabe.normalize import ExponentTriple
from exterior_yamabe.spectral import lambda_delta, pencil

PI = math.pi


def _zero_target(g, Hp=0.0):
    return CurvatureTarget(np.zeros(g.nodes.size), Hp)


def test_energy_examples(grid512, flat512, well512, full512):
    u = 1 / grid512.nodes
    e = energy(flat512, full512, u)
    h2 = grid512.log_step**2
    assert e.dirichlet == pytest.approx(4 * PI, rel=10 * h2)
    assert e.interior_R == 0.0
    assert e.boundary_H == pytest.approx(2 * PI, rel=1e-14)
    assert e.total == pytest.approx(6 * PI, rel=10 * h2)
    assert e.total == e.dirichlet + e.interior_R + e.boundary_H
    no_bdry = region_from_intervals(grid512, [(1, grid512.R_max)], False)
    # the trace is masked, so the boundary node itself is zeroed
    assert energy(flat512, no_bdry, u).boundary_H == 0.0
    z = energy(well512, full512, np.zeros(grid512.nodes.size))
    assert (z.dirichlet, z.interior_R, z.boundary_H, z.total) == (0.0, 0.0, 0.0, 0.0)


def test_energy_without_boundary_is_dirichlet():
    g = build_grid(3, 1e4, 2048)
    m = flat_metric(g)
    u = 1 / g.nodes
    # (M, empty): the boundary term drops; the trace condition is not imposed here
    e = energy(m, full_region(g), u)
    assert e.total - e.boundary_H == pytest.approx(4 * PI, rel=1e-5)


def test_energy_gradient_zero(grid512, flat512):
    region = region_from_intervals(grid512, [(1, grid512.R_max)], False)
    g = energy_gradient(flat512, region, np.zeros(grid512.nodes.size))
    assert np.all(g.values == 0.0)


def _fd_check(fun, grad, u, nodes, rel=1e-6):
    for i in nodes:
        t = 1e-6 * max(1.0, abs(u[i]))
        up, um = u.copy(), u.copy()
        up[i] += t
        um[i] -= t
        fd = (fun(up) - fun(um)) / (2 * t)
        assert fd == pytest.approx(grad[i], rel=rel, abs=1e-9 * max(1.0, abs(fun(u))))


def test_energy_gradient_fd(grid512, well512, full512):
    rng = np.random.default_rng(11)
    r = grid512.nodes
    u = (1 + 0.3 * rng.normal(size=r.size)) / r
    g = energy_gradient(well512, full512, u).values
    _fd_check(lambda v: energy(well512, full512, v).total, g, u, rng.choice(r.size, 20, replace=False))


def test_energy_gradient_masks(grid512, flat512):
    region = region_from_intervals(grid512, [(2, 5)], False)
    g = energy_gradient(flat512, region, np.ones(grid512.nodes.size)).values
    assert np.all(g[~region.free_nodes] == 0.0)


def test_energy_gradient_at_eigenvector(grid512, well512, full512):
    rep = lambda_delta(well512, full512, 0.0)
    _, _, b, idx = pencil(well512, full512, 0.0)
    g = energy_gradient(well512, full512, rep.minimizer).values[idx]
    Bu = 2 * rep.value * b * rep.minimizer.values[idx]
    assert np.linalg.norm(g - Bu) <= 1e-8 * np.linalg.norm(g)


def test_mask_idempotent(grid512, well512):
    region = region_from_intervals(grid512, [(1, 3), (10, 20)], True)
    u = np.cos(grid512.nodes) / grid512.nodes
    once = region.mask_values(u)
    assert energy(well512, region, once) == energy(well512, region, region.mask_values(once))
    assert energy(well512, region, u) == energy(well512, region, once)


def test_f_qr_examples(grid512, flat512):
    tgt = _zero_target(grid512)
    tri = ExponentTriple(6, 4)
    assert f_qr(flat512, tgt, tri, np.zeros(grid512.nodes.size)) == pytest.approx(2 * PI, rel=1e-14)
    h2 = grid512.log_step**2
    assert f_qr(flat512, tgt, tri, -1 / (3 * grid512.nodes)) == pytest.approx(4 * PI / 3, rel=10 * h2)


def test_f_qr_negative_interior_example():
    g = build_grid(3, 10.0, 256)
    tgt = CurvatureTarget(-np.ones(g.nodes.size), 0.0)
    F = f_qr(flat_metric(g), tgt, ExponentTriple(6, 4), np.zeros(g.nodes.size))
    # coefficient (n-2)/(2q(n-1)) = 1/24 for n = 3, q = 6
    assert F == pytest.approx(2 * PI + (1 / 24) * 4 * PI * (10.0**3 - 1) / 3, rel=1e-12)


def test_f_qr_equals_energy_when_targets_vanish(grid512, well512, full512):
    u = np.sin(grid512.nodes) / grid512.nodes
    F = f_qr(well512, _zero_target(grid512), ExponentTriple(5, 3), u)
    assert F == energy(well512, full512, u + 1.0, far_value=1.0).total


def test_f_qr_gradient_stationary(grid512, flat512):
    u = -1 / (3 * grid512.nodes)
    g = f_qr_gradient(flat512, _zero_target(grid512), ExponentTriple(4, 3), u).values
    scale = np.linalg.norm(f_qr_gradient(flat512, _zero_target(grid512), ExponentTriple(4, 3), 0 * u).values)
    assert np.linalg.norm(g) <= 10 * grid512.log_step**2 * scale


def test_f_qr_gradient_fd(grid512, well512):
    rng = np.random.default_rng(5)
    r = grid512.nodes
    tgt = CurvatureTarget(-0.3 * np.exp(-r), -0.7)
    tri = ExponentTriple(5.5, 3.5)
    u = 0.4 * rng.normal(size=r.size) / r
    g = f_qr_gradient(well512, tgt, tri, u).values
    _fd_check(lambda v: f_qr(well512, tgt, tri, v), g, u, rng.choice(r.size, 20, replace=False))


def test_f_qr_gradient_reflection(grid512, well512):
    # u -> -u - 2 flips v = u + 1; the gradient flips sign away from the far-field row
    r = grid512.nodes
    tgt = CurvatureTarget(-np.exp(-r), -1.0)
    tri = ExponentTriple(5, 3)
    u = 0.5 * np.cos(r) / r
    g1 = f_qr_gradient(well512, tgt, tri, u).values
    g2 = f_qr_gradient(well512, tgt, tri, -u - 2).values
    assert np.allclose(g1[:-1], -g2[:-1], rtol=1e-10, atol=1e-10 * np.max(np.abs(g1)))


def test_f_qr_target_grid_mismatch(grid512, flat512):
    with pytest.raises(ValueError):
        f_qr(flat512, CurvatureTarget(np.zeros(10), 0.0), ExponentTriple(6, 4), np.zeros(grid512.nodes.size))


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 2**31 - 1), st.floats(-0.45, 1.0))
def test_coupled_norm_parallelogram(seed, delta):
    g = build_grid(3, 100.0, 64)
    rng = np.random.default_rng(seed)
    u, v = rng.normal(size=(2, g.nodes.size))
    lhs = coupled_norm(g, u + v, delta) ** 2 + coupled_norm(g, u - v, delta) ** 2
    rhs = 2 * coupled_norm(g, u, delta) ** 2 + 2 * coupled_norm(g, v, delta) ** 2
    assert lhs == pytest.approx(rhs, rel=1e-12)


def test_gradient_energy_certificate():
    g = build_grid(3, 1000.0, 256)
    m = well_metric(g, depth=5.0)
    C, K, viol = gradient_energy_certificate(m, full_region(g), ExponentTriple(6, 4, 1), 300, seed=2)
    assert math.isfinite(C) and math.isfinite(K)
    assert viol <= 1e-9 * (abs(C) + abs(K) + 1)


def test_probe_coercivity_flat():
    g = build_grid(3, 1000.0, 256)
    m = flat_metric(g)
    tgt = CurvatureTarget(np.zeros(g.nodes.size), -1.0)
    rows = probe_coercivity(m, tgt, 4.0, 3.0, [0.0, 10.0, 1e3], samples=60, seed=4)
    assert [b for b, _, _ in rows] == [0.0, 10.0, 1e3]
    for _, K_hat, count in rows:
        assert math.isfinite(K_hat) and count >= 0
    # K_hat grows with B since the sublevel sets are nested
    assert rows[0][1] <= rows[1][1] <= rows[2][1]
    with pytest.raises(ValueError):
        probe_coercivity(m, tgt, 4.0, 3.0, [], samples=5, seed=0)


def test_f_qr_grows_along_rays():
    g = build_grid(3, 1000.0, 256)
    m = flat_metric(g)
    tgt = CurvatureTarget(np.zeros(g.nodes.size), -1.0)
    u = 1 / g.nodes
    vals = [f_qr(m, tgt, ExponentTriple(5, 3.5), s * u) for s in (1, 10, 100, 1000)]
    assert all(b > a for a, b in zip(vals, vals[1:]))


def test_probe_coercivity_rejects():
    g = build_grid(3, 1000.0, 128)
    with pytest.raises(ValueError):
        probe_coercivity(flat_metric(g), CurvatureTarget(np.ones(g.nodes.size), 0.0), 4, 3, [0], 5, 0)
    with pytest.raises(ValueError):
        probe_coercivity(well_metric(g), CurvatureTarget(np.zeros(g.nodes.size), 0.0), 4, 3, [0], 5, 0)
