import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from hypocert import sphere

finite = st.floats(-10, 10, allow_nan=False)


def random_points(d, n, seed=0):
    g = np.random.default_rng(seed).standard_normal((n, d))
    return g / np.linalg.norm(g, axis=1, keepdims=True)


# ---------------------------------------------------------------- unit vectors

def test_unit_vector_renormalizes_near_unit_input():
    w = sphere.unit_vector([0.6, 0.8 + 1e-10])
    assert abs(np.linalg.norm(w) - 1.0) <= sphere.UNIT_TOL


@pytest.mark.parametrize("bad", [[0.0, 0.0], [2.0, 0.0], [1.0]])
def test_unit_vector_rejects(bad):
    with pytest.raises(ValueError):
        sphere.unit_vector(bad)


@given(arrays(float, 4, elements=finite), arrays(float, 4, elements=finite))
def test_project_tangent_is_orthogonal_and_idempotent(w, v):
    if np.linalg.norm(w) < 1e-3:
        return
    w = w / np.linalg.norm(w)
    p = sphere.project_tangent(w, v)
    assert abs(p @ w) <= 1e-9 * (1 + np.linalg.norm(v))
    np.testing.assert_allclose(sphere.project_tangent(w, p), p, atol=1e-9 * (1 + np.linalg.norm(v)))


def test_project_tangent_dimension_mismatch():
    with pytest.raises(ValueError):
        sphere.project_tangent(np.array([1.0, 0.0]), np.array([1.0, 0.0, 0.0]))


# ---------------------------------------------------------------- Laplace-Beltrami

@pytest.mark.parametrize("d", [2, 3, 5])
def test_linear_functions_are_eigenfunctions(d):
    W = random_points(d, 200, seed=d)
    for n in range(d):
        e = np.zeros(d)
        e[n] = 1.0
        lb = sphere.laplace_beltrami(sphere.linear_function(e), W)
        np.testing.assert_allclose(lb, -(d - 1) * W[:, n], atol=1e-12)


def test_circle_laplacian_matches_spectral_derivative():
    # on S^1 the Laplace-Beltrami operator is d²/dα²; differentiate in Fourier space
    n = 64
    alpha = 2 * np.pi * np.arange(n) / n
    W = np.column_stack([np.cos(alpha), np.sin(alpha)])
    f = sphere.polynomial([(1.0, [3, 1]), (-2.0, [0, 2]), (0.5, [1, 0])])
    vals = f.value(W)
    k = np.fft.fftfreq(n, 1.0 / n)
    second = np.real(np.fft.ifft(-(k**2) * np.fft.fft(vals)))
    np.testing.assert_allclose(sphere.laplace_beltrami(f, W), second, atol=1e-10)


@pytest.mark.parametrize("d", [3, 4])
def test_quadratic_form_laplacian(d, rng):
    # Δ_S (Bω, ω) = 2 tr B - 2d (Bω, ω) for symmetric B (degree-2 harmonic split)
    B = rng.standard_normal((d, d))
    B = B + B.T
    f = sphere.quadratic_function(B)
    W = random_points(d, 50)
    exact = 2 * np.trace(B) - 2 * d * np.einsum("ni,ij,nj->n", W, B, W)
    np.testing.assert_allclose(sphere.laplace_beltrami(f, W), exact, atol=1e-10)


@pytest.mark.parametrize("d", [2, 3, 5])
def test_closed_form_matches_nested_fields(d):
    f = sphere.polynomial([(1.0, [2, 1] + [0] * (d - 2)), (0.3, [0] * (d - 1) + [4])])
    W = random_points(d, 20)
    np.testing.assert_allclose(sphere.laplace_beltrami(f, W), sphere.laplace_beltrami_nested(f, W), atol=1e-6)


def test_laplace_beltrami_requires_hessian():
    f = sphere.AmbientFunction(lambda w: w[..., 0], lambda w: np.ones_like(w))
    with pytest.raises(ValueError):
        sphere.laplace_beltrami(f, np.array([1.0, 0.0]))


@given(st.integers(2, 5), st.integers(0, 10_000))
def test_product_rule_gradient(d, seed):
    r = np.random.default_rng(seed)
    f = sphere.linear_function(r.standard_normal(d))
    g = sphere.quadratic_function(r.standard_normal((d, d)))
    W = random_points(d, 5, seed)
    fg = sphere.product(f, g)
    expect = f.gradient(W) * g.value(W)[:, None] + g.gradient(W) * f.value(W)[:, None]
    np.testing.assert_allclose(fg.gradient(W), expect, atol=1e-10)


# ---------------------------------------------------------------- quadrature and moments

@given(st.integers(3, 40), arrays(float, 2, elements=finite))
def test_angle_grid_linear_moment_vanishes(n, z):
    q = sphere.angle_grid(n)
    assert abs(sphere.sphere_moment_linear(z, q)) <= 1e-12 * (1 + np.abs(z).sum())


@given(arrays(float, (2, 2), elements=finite), arrays(float, 2, elements=finite), arrays(float, 2, elements=finite))
def test_angle_grid_quadratic_moments(B, z1, z2):
    q = sphere.angle_grid(16)
    scale = 1 + np.abs(B).sum() + np.abs(z1).sum() * np.abs(z2).sum()
    assert abs(sphere.sphere_moment_quadratic(B, q) - np.trace(B) / 2) <= 1e-12 * scale
    assert abs(sphere.sphere_moment_bilinear(z1, z2, q) - z1 @ z2 / 2) <= 1e-12 * scale


def test_monte_carlo_moments_within_three_se():
    d = 3
    q = sphere.monte_carlo(d, 200_000, seed=4)
    z1, z2 = np.array([1.0, -2.0, 0.5]), np.array([0.3, 0.1, 2.0])
    vals = (q.nodes @ z1) * (q.nodes @ z2)
    assert abs(q.integrate(vals) - z1 @ z2 / d) <= 3 * q.standard_error(vals)


def test_monte_carlo_is_seeded():
    a = sphere.monte_carlo(4, 100, seed=9).nodes
    b = sphere.monte_carlo(4, 100, seed=9).nodes
    np.testing.assert_array_equal(a, b)
    np.testing.assert_allclose(np.linalg.norm(a, axis=1), 1.0, atol=1e-12)


def test_quadrature_rejects_bad_weights():
    with pytest.raises(ValueError):
        sphere.SphereQuadrature(np.eye(2), np.array([0.7, 0.7]), "custom")


# ---------------------------------------------------------------- identity suite

def test_identity_suite_passes_on_grid():
    checks = sphere.verify_identities(2, sphere.angle_grid(64))
    assert all(c.passed for c in checks), [c for c in checks if not c.passed]
    assert {c.name for c in checks} >= {"moment_linear", "moment_quadratic", "green", "eigen_linear"}


def test_identity_suite_flags_sign_fault():
    failed = {c.name for c in sphere.verify_identities(2, sphere.angle_grid(64), fault="sign-flip") if not c.passed}
    assert {"eigen_linear", "green"} <= failed


def test_identity_suite_checks_dimension():
    with pytest.raises(ValueError):
        sphere.verify_identities(3, sphere.angle_grid(8))
