import json

import numpy as np
import pytest

from exterior_yamabe.calculus import laplacian
from exterior_yamabe.conformal import apply_conformal, conformal_curvatures, mms_case
from exterior_yamabe.domain import (
    DECAY_TOL,
    Metric,
    build_grid,
    flat_metric,
    well_metric,
)


def _h2(g):
    return g.log_step**2


@pytest.mark.parametrize("a,Hp", [(-0.5, -4.0), (0.5, 2.5 / 3.375)])
def test_curvatures_of_harmonic_factor(grid512, flat512, a, Hp):
    t = conformal_curvatures(flat512, 1 + a / grid512.nodes)
    assert np.max(np.abs(t.Rp)) <= 10 * _h2(grid512)
    assert t.Hp == pytest.approx(Hp, abs=10 * _h2(grid512))


def test_identity_factor(grid512, well512):
    t = conformal_curvatures(well512, np.ones(grid512.nodes.size))
    assert np.array_equal(t.Rp, well512.R) and t.Hp == well512.H
    assert apply_conformal(well512, np.ones(grid512.nodes.size)) is well512


def test_rejects_bad_factor(grid512, flat512):
    phi = 1 + 0.5 / grid512.nodes
    with pytest.raises(ValueError):
        conformal_curvatures(flat512, -phi)
    with pytest.raises(ValueError):
        conformal_curvatures(flat512, phi + 10 * DECAY_TOL)
    with pytest.raises(ValueError):
        conformal_curvatures(flat512, phi[:-1])


def test_apply_conformal_fields(grid512, flat512):
    phi = 1 - 0.5 / grid512.nodes
    m = apply_conformal(flat512, phi)
    assert np.array_equal(m.phi, phi)
    assert np.max(np.abs(m.R)) <= 10 * _h2(grid512)
    assert m.H == pytest.approx(-4.0, abs=10 * _h2(grid512))
    # still asymptotically Euclidean
    assert abs(m.phi[-1] - 1) <= DECAY_TOL


def test_group_law(grid512):
    m = well_metric(grid512, depth=5.0)
    r = grid512.nodes
    p1 = 1 + 0.3 / r
    p2 = 1 - 0.2 * np.exp(-(r - 1)) - 0.1 / r
    twice = apply_conformal(apply_conformal(m, p1), p2)
    once = apply_conformal(m, p1 * p2)
    scale = 1 + np.max(np.abs(once.R))
    # the well has a jump, so compare away from the two cells around it
    away = np.abs(r - 2) > 3 * (r * grid512.log_step)
    assert np.max(np.abs(twice.R - once.R)[away]) <= 10 * _h2(grid512) * scale
    assert twice.H == pytest.approx(once.H, abs=10 * _h2(grid512) * (1 + abs(once.H)))


def test_readback_second_order():
    def factor(r):
        return 1 + 0.4 * np.exp(-(r - 1)) / r

    # reference: the same read-back on a much finer grid
    fine = build_grid(3, 1000.0, 8192)
    tf = conformal_curvatures(flat_metric(fine), factor(fine.nodes))
    dR, dH = [], []
    for N in (256, 512, 1024):
        g = build_grid(3, 1000.0, N)
        t = conformal_curvatures(flat_metric(g), factor(g.nodes))
        dR.append(np.max(np.abs(t.Rp - np.interp(g.nodes, fine.nodes, tf.Rp))))
        dH.append(abs(t.Hp - tf.Hp))
    assert all(np.log2(a / b) > 1.7 for a, b in zip(dR, dR[1:]))
    assert all(np.log2(a / b) > 1.7 for a, b in zip(dH, dH[1:]))


@pytest.mark.parametrize("a,Hp", [(-0.5, -4.0), (0.0, 1.0), (-0.4, -0.2 / 0.216)])
def test_mms_examples(grid512, a, Hp):
    case = mms_case(grid512, a)
    assert case.target.Hp == pytest.approx(Hp, rel=1e-14, abs=1e-15)
    assert np.all(case.target.Rp == 0.0)
    assert np.allclose(case.u_exact.values, a / grid512.nodes, rtol=1e-15, atol=0)
    lap = laplacian(flat_metric(grid512), case.phi.values, far_value=1.0).values
    assert np.max(np.abs(lap)) <= 10 * _h2(grid512)


def test_mms_matches_readback(grid512, flat512):
    case = mms_case(grid512, -0.5)
    t = conformal_curvatures(flat512, case.phi)
    assert t.Hp == pytest.approx(case.target.Hp, abs=10 * _h2(grid512) * 4)


def test_mms_rejects(grid512):
    with pytest.raises(ValueError):
        mms_case(grid512, -1.0)


def test_mms_json(grid512):
    rec = json.loads(mms_case(grid512, -0.5).to_json())
    assert list(rec) == ["n", "nodes", "phi", "R", "H", "u_exact"]
    assert rec["H"] == -4.0
    m = Metric.from_record({k: rec[k] for k in ("n", "nodes", "phi", "R", "H")})
    assert m.grid.nodes.size == grid512.nodes.size
