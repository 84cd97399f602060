import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from carlab.control import (
    AUTO_C1,
    CGFailure,
    ControlProblem,
    SemilinearSpec,
    auto_eps,
    dense_gramian,
    dense_hum,
    frozen_potential,
    hum_control,
    observability_samples,
    random_potential,
    semilinear_control,
)
from carlab.mesh import build_piecewise_uniform
from carlab.operator import Coefficient, assemble


def problem(scale=3, steps=50, T=0.5, omega=(0.5, 0.9), potential=None, scheme="cn", a="1/3"):
    mesh = build_piecewise_uniform(a, scale)
    op = assemble(mesh, Coefficient.piecewise_constant(1.0, 2.0, mesh.a))
    return ControlProblem(op, omega, T, steps, scheme, potential)


def test_auto_eps_calibration():
    assert auto_eps(1 / 60) == pytest.approx(1e-4, rel=1e-12)
    assert auto_eps(1 / 30) == pytest.approx(1e-2, rel=1e-12)
    assert AUTO_C1 == pytest.approx(math.log(1e4) / 60)


def test_omega_validation():
    with pytest.raises(ValueError):
        problem(omega=(0.9, 0.5))
    with pytest.raises(ValueError):
        problem(scale=1, omega=(0.4, 0.6))


@pytest.mark.parametrize("scheme", ["cn", "ie"])
def test_gramian_symmetric_psd(scheme):
    prob = problem(scale=2, steps=20, scheme=scheme)
    G = dense_gramian(prob)
    HG = prob.weights[:, None] * G
    np.testing.assert_allclose(HG, HG.T, atol=1e-14 * np.abs(HG).max())
    assert np.linalg.eigvalsh(0.5 * (HG + HG.T)).min() >= -1e-14 * np.abs(HG).max()


def test_hum_matches_dense_oracle():
    prob = problem(scale=1, steps=10, a="1/3", omega=(0.3, 0.8))
    y0 = np.array([1.0, -0.5])
    for eps in (1e-2, 1e-5):
        res = hum_control(prob, y0, eps)
        q = dense_hum(prob, y0, eps)
        assert np.max(np.abs(res.qT - q)) <= 1e-8 * np.max(np.abs(q))


@pytest.mark.parametrize("scheme", ["cn", "ie"])
def test_optimality_relations(scheme):
    prob = problem(scale=4, steps=60, scheme=scheme)
    y0 = np.sin(np.pi * prob.mesh.interior)
    res = hum_control(prob, y0, 1e-4)
    assert res.converged and res.grad_rel <= 1e-9
    # the controlled final state equals -eps qT at the optimum
    np.testing.assert_allclose(res.trajectory.final[1:-1], -res.eps * res.qT, atol=1e-8 * prob.norm(y0))
    assert res.J < 0 and res.certificate
    assert np.all(res.v[:, ~prob.mask] == 0)
    assert res.norm_yT < 0.05 * res.norm_y0
    assert len(res.residual_history) == res.cg_iters + 1


def test_zero_initial_state():
    prob = problem()
    res = hum_control(prob, np.zeros(prob.op.size))
    assert res.cg_iters == 0 and res.norm_v == 0 and res.norm_yT == 0


def test_cg_iteration_cap_raises():
    prob = problem(scale=6, steps=40)
    with pytest.raises(CGFailure) as err:
        hum_control(prob, np.sin(np.pi * prob.mesh.interior), 1e-8, maxiter=1)
    assert err.value.history


@settings(max_examples=10, deadline=None)
@given(seed=st.integers(0, 2**31))
def test_duality_random_pairs(seed):
    prob = problem(scale=4, steps=40, potential=random_potential(problem(scale=4).mesh.interior, 3))
    rng = np.random.default_rng(seed)
    N = prob.op.size
    v = rng.standard_normal((prob.steps, N)) * prob.mask
    qT = rng.standard_normal(N)
    y0 = rng.standard_normal(N)
    y = prob.forward(y0, v)
    q = prob.adjoint(qT)
    lhs = prob.inner(y.final[1:-1], qT) - prob.inner(y0, q.states[0, 1:-1])
    rhs = prob.dt * sum(prob.inner(v[k], q.observation[k]) for k in range(prob.steps))
    assert abs(lhs - rhs) <= 1e-12 * max(abs(lhs), abs(rhs), 1e-300)


def test_random_potential_is_mesh_independent():
    x = np.array([0.25, 0.5])
    a = random_potential(x, seed=4)
    b = random_potential(np.linspace(0, 1, 5), seed=4)[[1, 2]]
    np.testing.assert_allclose(a, b, rtol=1e-14)
    assert np.max(np.abs(random_potential(np.linspace(0, 1, 101), 4))) <= sum(1 / j for j in range(1, 5))


def test_observability_samples_shape():
    prob = problem(scale=3, steps=30)
    S = observability_samples(prob, 4, 2, np.random.default_rng(0))
    assert S.shape == (6, 3) and np.all(S > 0)
    np.testing.assert_allclose(S[:4, 2], 1.0)
    # the adjoint dissipates: |q(0)| <= |q(T)|
    assert np.all(S[:, 0] <= S[:, 2] * (1 + 1e-12))


def test_semilinear_spec_validation():
    SemilinearSpec.sine()
    SemilinearSpec.log_growth(1.2)
    with pytest.raises(ValueError):
        SemilinearSpec.log_growth(1.6)
    with pytest.raises(ValueError):
        SemilinearSpec(lambda x: x, "log", r=1.0)
    with pytest.raises(ValueError):
        SemilinearSpec(lambda x: 2 * np.sin(x), "bounded", bound=1.0)


def test_frozen_potential_reproduces_forward():
    prob = problem(scale=3, steps=40)
    y0 = np.sin(np.pi * prob.mesh.interior)
    y = prob.forward(y0, g=np.sin)
    pot = frozen_potential(y, np.sin)
    lin = ControlProblem(prob.op, prob.omega, prob.T, prob.steps, prob.scheme, pot)
    np.testing.assert_allclose(lin.forward(y0).states, y.states, rtol=1e-13, atol=1e-15)


@pytest.mark.parametrize("spec", [SemilinearSpec.sine(), SemilinearSpec.log_growth(1.2)])
def test_semilinear_fixed_point(spec):
    prob = problem(scale=3, steps=100)
    y0 = np.sin(np.pi * prob.mesh.interior)
    y0 = y0 / prob.norm(y0)
    res = semilinear_control(prob, y0, spec, 1e-4, M=1.0)
    assert res.converged and res.iterations <= 50
    assert res.increments[-1] <= 1e-8
    # the reported final state comes from the semilinear dynamics driven by v
    y = prob.forward(y0, res.v, g=spec.g)
    np.testing.assert_allclose(res.trajectory.final, y.final, atol=1e-10)
    assert res.norm_yT < 0.1


def test_semilinear_zero_matches_linear():
    prob = problem(scale=3, steps=60)
    y0 = np.sin(np.pi * prob.mesh.interior)
    a = semilinear_control(prob, y0, SemilinearSpec.zero(), 1e-4)
    b = hum_control(prob, y0, 1e-4)
    np.testing.assert_allclose(a.v, b.v, atol=1e-12)
    # first pass moves from the free to the controlled state, second sees no change
    assert a.iterations == 2 and a.increments[-1] == 0.0


def test_semilinear_rejects_large_data():
    prob = problem()
    with pytest.raises(ValueError):
        semilinear_control(prob, 10 * np.ones(prob.op.size), SemilinearSpec.log_growth(), M=1.0)


def test_control_is_homogeneous_in_y0():
    prob = problem(scale=4, steps=80)
    y0 = np.sin(np.pi * prob.mesh.interior)
    a = hum_control(prob, y0, 1e-4)
    b = hum_control(prob, 2 * y0, 1e-4)
    assert b.norm_v == pytest.approx(2 * a.norm_v, rel=1e-8)
    np.testing.assert_allclose(b.v, 2 * a.v, atol=1e-9 * np.abs(a.v).max())
