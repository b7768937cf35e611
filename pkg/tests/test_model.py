import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from scipy import integrate

from hypocert import model, sphere


def unit_points(d, n, seed=0):
    g = np.random.default_rng(seed).standard_normal((n, d))
    return g / np.linalg.norm(g, axis=1, keepdims=True)


def bump_times(d, wfun, radius=2.0):
    v, g, _ = model.bump(radius)
    return model.phase_product(model.phase_from_position(v, g, radius), model.phase_from_velocity(wfun))


# ---------------------------------------------------------------- potentials

@pytest.mark.parametrize("a", [[1.0, 1.0], [0.5, 3.0], [2.0, 1.0, 0.25]])
def test_quadratic_density_is_normalized(a):
    pot = model.quadratic_potential(a)
    total = 1.0
    for ak in a:
        # the density factorizes over axes
        val, _ = integrate.quad(lambda t: np.exp(-ak * t * t), -np.inf, np.inf)
        total *= val
    assert abs(total * np.exp(-pot.log_normalizer) - 1.0) < 1e-10


@pytest.mark.parametrize("amp", [0.0, 0.5, 2.0])
def test_torus_density_is_normalized(amp):
    pot = model.torus_potential(amp)
    one, _ = integrate.quad(lambda t: np.exp(-amp * (1 - np.cos(t))), 0, 2 * np.pi)
    assert abs(one**2 * np.exp(-pot.log_normalizer) - 1.0) < 1e-10


def test_quadratic_metadata():
    pot = model.quadratic_potential([1.0, 3.0])
    assert pot.poincare_constant == 2.0
    assert pot.hessian_growth_c == pytest.approx(np.hypot(2.0, 6.0))
    x = np.array([[0.3, -1.0]])
    np.testing.assert_allclose(pot.gradient(x), [[0.6, -6.0]])


def test_quadratic_rejects_nonpositive():
    with pytest.raises(ValueError):
        model.quadratic_potential([1.0, 0.0])


@given(st.floats(-3, 3), st.floats(-3, 3), st.floats(0.1, 3))
def test_torus_gradient_matches_finite_difference(x1, x2, amp):
    pot = model.torus_potential(amp)
    x = np.array([x1, x2])
    h = 1e-6
    fd = [(pot.value(x + h * e) - pot.value(x - h * e)) / (2 * h) for e in np.eye(2)]
    np.testing.assert_allclose(pot.gradient(x), fd, atol=1e-6)


def test_flat_torus_has_unit_gap():
    assert model.torus_potential(0.0).poincare_constant == 1.0
    assert model.torus_potential(1.0).poincare_constant is None


def test_condition_checks_on_quadratic():
    pot = model.quadratic_potential([1.0, 2.0])
    probe = model.probe_grid(2, 3.0, 21)
    # |∇²V|_F/(1+|∇V|) is largest where ∇V = 0
    assert model.check_C3(pot, probe) == pytest.approx(np.hypot(2.0, 4.0))
    # ΔV = 2 Σ a_i; with c₃ = 0 the smallest c₂ is exactly that
    assert model.check_A3(pot, probe, 0.0) == pytest.approx(6.0)
    with pytest.raises(ValueError):
        model.check_A3(pot, probe, 0.5)


# ---------------------------------------------------------------- generator

def test_fiber_model_validation():
    with pytest.raises(ValueError):
        model.FiberModel(1, 1.0, model.quadratic_potential([1.0]))
    with pytest.raises(ValueError):
        model.FiberModel(2, 0.0, model.quadratic_potential([1.0, 1.0]))
    with pytest.raises(ValueError):
        model.FiberModel(3, 1.0, model.quadratic_potential([1.0, 1.0]))


def test_S_on_first_coordinate_d3():
    m = model.FiberModel(3, 1.0, model.quadratic_potential([1.0, 1.0, 1.0]))
    f = model.phase_from_velocity(sphere.linear_function([1.0, 0.0, 0.0]))
    W = unit_points(3, 30)
    X = np.random.default_rng(1).standard_normal((30, 3))
    np.testing.assert_allclose(model.apply_S(m, f, X, W), -W[:, 0], atol=1e-12)


@given(st.integers(2, 4), st.floats(0.2, 3.0), st.integers(0, 1000))
def test_operator_split_matches_direct_form(d, sigma, seed):
    r = np.random.default_rng(seed)
    m = model.FiberModel(d, sigma, model.quadratic_potential(r.uniform(0.5, 2.0, d)))
    f = bump_times(d, sphere.quadratic_function(r.standard_normal((d, d))))
    X = r.uniform(-1.5, 1.5, (10, d))
    W = unit_points(d, 10, seed)
    np.testing.assert_allclose(model.apply_L(m, f, X, W), model.apply_L_direct(m, f, X, W), atol=1e-10)


def test_A_of_velocity_function_is_grad_phi_pairing():
    # for f(w) = (z, w): A f = grad_S Φ · grad_S f = (P∇V, z)/(d-1) with P = I - w wᵀ
    d = 3
    m = model.FiberModel(d, 1.0, model.quadratic_potential([1.0, 2.0, 0.5]))
    z = np.array([0.2, -1.0, 0.7])
    f = model.phase_from_velocity(sphere.linear_function(z))
    X = np.random.default_rng(2).standard_normal((8, d))
    W = unit_points(d, 8, 2)
    gV = m.potential.gradient(X)
    expect = (gV @ z - np.sum(W * gV, 1) * (W @ z)) / (d - 1)
    np.testing.assert_allclose(model.apply_A(m, f, X, W), expect, atol=1e-12)


@pytest.fixture(scope="module")
def quad2():
    pot = model.quadratic_potential([1.0, 0.5])
    return model.FiberModel(2, 1.3, pot), model.box_quadrature(pot, 2.0, 81), sphere.angle_grid(32)


def test_invariance_of_mu(quad2):
    m, xq, sq = quad2
    f = bump_times(2, sphere.polynomial([(1.0, [1, 0]), (2.0, [1, 1])]), radius=1.9)
    assert abs(model.check_invariance(m, f, xq, sq)) < 1e-6


def test_symmetry_and_antisymmetry(quad2):
    m, xq, sq = quad2
    f = bump_times(2, sphere.polynomial([(1.0, [1, 0]), (0.5, [0, 2])]), radius=1.9)
    g = bump_times(2, sphere.polynomial([(1.0, [0, 1]), (-1.0, [2, 1])]), radius=1.8)
    s_fg = model.phase_inner(m, model.apply_S, f, g, xq, sq)
    s_gf = model.phase_inner(m, model.apply_S, g, f, xq, sq)
    a_fg = model.phase_inner(m, model.apply_A, f, g, xq, sq)
    a_gf = model.phase_inner(m, model.apply_A, g, f, xq, sq)
    assert abs(s_fg - s_gf) < 1e-6
    assert abs(a_fg + a_gf) < 1e-5
    assert model.phase_inner(m, model.apply_S, f, f, xq, sq) < 0


def test_invariance_rejects_support_outside_box(quad2):
    m, xq, sq = quad2
    f = bump_times(2, sphere.linear_function([1.0, 0.0]), radius=5.0)
    with pytest.raises(ValueError):
        model.check_invariance(m, f, xq, sq)


# ---------------------------------------------------------------- constants

@pytest.mark.parametrize("d,sigma,lam", [(2, 1.0, 2.0), (3, 0.5, 1.0), (5, 2.0, 0.3)])
def test_analytic_constants(d, sigma, lam):
    pot = model.quadratic_potential(np.full(d, lam / 2))
    lm, lM, n1 = model.analytic_constants(model.FiberModel(d, sigma, pot))
    assert lm == sigma**2 * (d - 1) / 2
    assert lM == pytest.approx(lam / d, rel=1e-15)
    assert n1 == (d - 1) * sigma**2 / 4


def test_analytic_constants_need_poincare():
    with pytest.raises(ValueError, match="Poincar"):
        model.analytic_constants(model.FiberModel(2, 1.0, model.torus_potential(1.0)))
