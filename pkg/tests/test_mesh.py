import json
from fractions import Fraction

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from carlab.calculus import diff_D, diff_Dbar, norm_primal
from carlab.mesh import (
    Mesh1D,
    as_fraction,
    build_from_map,
    build_piecewise_uniform,
    compute_zeta,
    cubic_map,
    identity_map,
    quadratic_map,
    sample,
    transfer_from_uniform,
    transfer_to_uniform,
)

SAMPLE_MAPS = [
    lambda a: quadratic_map(a, 1.0),
    lambda a: cubic_map(a, 2.0),
    lambda a: quadratic_map(a, -0.4),
]


def test_third_mesh_enumeration():
    m = build_piecewise_uniform("1/3", 3)
    assert m.nodes.size == 10
    np.testing.assert_allclose(m.nodes, np.arange(10) / 9, rtol=0, atol=1e-15)
    assert m.jump_index == 3
    assert m.h == pytest.approx(1 / 9, rel=1e-14)
    np.testing.assert_allclose(m.dual_steps, 1 / 9, rtol=1e-13)


def test_smallest_mesh():
    m = build_piecewise_uniform((1, 2), 1)
    np.testing.assert_array_equal(m.nodes, [0.0, 0.5, 1.0])
    assert m.jump_index == 1 and m.h == 0.5


@pytest.mark.parametrize("bad", ["2/4", "3/2", "0/5", (4, 2), "1/1"])
def test_rejects_bad_fractions(bad):
    with pytest.raises(ValueError):
        as_fraction(bad)


def test_rejects_bad_scale():
    with pytest.raises(ValueError):
        build_piecewise_uniform("1/3", 0)


@settings(max_examples=60, deadline=None)
@given(q=st.integers(2, 12), data=st.data(), s=st.integers(1, 20))
def test_piecewise_uniform_invariants(q, data, s):
    p = data.draw(st.integers(1, q - 1))
    frac = Fraction(p, q)
    m = build_piecewise_uniform(frac, s)
    assert np.all(np.diff(m.nodes) > 0)
    assert m.nodes.size == frac.denominator * s + 1
    assert abs(m.a - float(frac)) <= 1e-14 * max(1.0, float(frac))
    hp = m.primal_steps
    np.testing.assert_allclose(m.dual_steps, 0.5 * (m.nodes[2:] - m.nodes[:-2]), rtol=1e-13)
    np.testing.assert_allclose(hp, hp[0], rtol=1e-12)


def test_json_roundtrip():
    m = build_from_map(quadratic_map("1/3", 1.0), 4)
    back = Mesh1D.from_json(m.to_json())
    np.testing.assert_array_equal(back.nodes, m.nodes)
    assert back.jump_index == m.jump_index and back.L == m.L
    data = json.loads(m.to_json())
    assert set(data) >= {"nodes", "jump_index", "L"}


def test_identity_map_matches_uniform():
    for s in (1, 3, 7):
        a = build_from_map(identity_map("2/5"), s)
        b = build_piecewise_uniform("2/5", s)
        np.testing.assert_allclose(a.nodes, b.nodes, rtol=0, atol=1e-15)
        assert a.jump_index == b.jump_index


@pytest.mark.parametrize("make", SAMPLE_MAPS)
def test_map_invariants(make):
    tm = make("1/3")
    assert tm.inf_dtheta > 0
    x = np.linspace(0, 1, 1001)
    assert np.all(np.diff(tm.theta(x)) > 0)
    a = float(tm.a)
    win = np.linspace(a - tm.delta, a + tm.delta, 51)
    assert np.max(np.abs(tm.d2theta(win))) == 0.0
    # analytic derivative against central differences
    xs = np.linspace(0.05, 0.95, 37)
    e = 1e-6
    np.testing.assert_allclose((tm.theta(xs + e) - tm.theta(xs - e)) / (2 * e), tm.dtheta(xs), rtol=1e-6)


def test_rejects_non_monotone_map():
    with pytest.raises(ValueError):
        quadratic_map("1/3", -5.0)


@pytest.mark.parametrize("make", SAMPLE_MAPS)
@pytest.mark.parametrize("scale", [2, 8, 30])
def test_zeta_bounds(make, scale):
    tm = make("1/3")
    mesh = build_from_map(tm, scale)
    z = compute_zeta(mesh)
    for arr in (z.zeta, z.zeta_bar):
        assert tm.inf_dtheta <= arr.min() and arr.max() <= tm.sup_dtheta
    bound = tm.sup_d2theta / tm.inf_dtheta
    assert np.max(np.abs(diff_Dbar(mesh, z.zeta))) <= bound
    dzb = np.diff(z.zeta_bar) / mesh.primal_steps[1:-1]
    assert np.max(np.abs(dzb)) <= bound


def test_zeta_bar_at_jump_is_slope():
    tm = quadratic_map("1/3", 1.0)
    mesh = build_from_map(tm, 12)
    z = compute_zeta(mesh)
    k = mesh.jump_index
    assert z.zeta_bar[k - 1] == pytest.approx(float(tm.dtheta(np.array([float(tm.a)]))[0]), rel=1e-12)


def test_uniform_zeta_is_one():
    m = build_piecewise_uniform("1/4", 5)
    z = compute_zeta(m, m.h)
    np.testing.assert_allclose(z.zeta, 1.0, rtol=1e-12)
    np.testing.assert_allclose(z.zeta_bar, 1.0, rtol=1e-12)


@pytest.mark.parametrize("make", SAMPLE_MAPS)
def test_commutation_and_norm_equivalence(make):
    tm = make("1/3")
    mesh = build_from_map(tm, 10)
    uni = build_piecewise_uniform("1/3", 10)
    rng = np.random.default_rng(3)
    z = compute_zeta(mesh)
    for _ in range(20):
        u = np.zeros(mesh.nodes.size)
        u[1:-1] = rng.standard_normal(mesh.n_interior)
        Qu = transfer_to_uniform(u, mesh, uni)
        lhs = diff_D(uni, Qu)
        rhs = transfer_to_uniform(z.zeta * diff_D(mesh, u), mesh, uni)
        assert np.max(np.abs(lhs - rhs)) <= 1e-13 * np.max(np.abs(lhs))
        nu, nq = norm_primal(mesh, u) ** 2, norm_primal(uni, Qu) ** 2
        assert nu / tm.sup_dtheta <= nq <= nu / tm.inf_dtheta
        np.testing.assert_array_equal(transfer_from_uniform(Qu, uni, mesh), u)


def test_sampling_commutes_with_transfer():
    tm = quadratic_map("1/3", 1.0)
    mesh = build_from_map(tm, 6)
    uni = build_piecewise_uniform("1/3", 6)
    f = lambda x: x**2
    lhs = transfer_to_uniform(sample(f, mesh), mesh, uni)
    rhs = sample(lambda x: f(tm.theta(x)), uni)
    np.testing.assert_allclose(lhs, rhs, rtol=1e-14, atol=1e-15)


def test_transfer_rejects_count_mismatch():
    with pytest.raises(ValueError):
        transfer_to_uniform(np.zeros(10), build_piecewise_uniform("1/3", 3), build_piecewise_uniform("1/3", 4))


def test_nu_second_difference_stays_bounded():
    # nu = 1 / (Q zeta_bar): second differences must not blow up under refinement
    tm = cubic_map("1/3", 2.0)
    vals = []
    for s in (10, 20, 40):
        mesh = build_from_map(tm, s)
        uni = build_piecewise_uniform("1/3", s)
        nu = np.ones(mesh.nodes.size)
        nu[1:-1] = 1.0 / compute_zeta(mesh).zeta_bar
        nu[0], nu[-1] = nu[1], nu[-2]
        dd = diff_Dbar(uni, diff_D(uni, nu))[1:-1]
        vals.append(np.max(np.abs(dd)))
    assert vals[1] < 1.5 * vals[0] and vals[2] < 1.5 * vals[1]
    assert vals[-1] <= 10 * tm.inf_dtheta**-3 * (tm.sup_d2theta + tm.sup_d2theta**2)
