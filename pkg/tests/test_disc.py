import dataclasses

import numpy as np
import pytest
import scipy.sparse as sp

from hypocert import disc, hypo, model


def torus_model(amp=1.0, sigma=1.0):
    return model.FiberModel(2, sigma, model.torus_potential(amp))


@pytest.fixture(scope="module")
def torus16():
    m = torus_model()
    return m, disc.discretize_fiber(m, disc.torus_grid(16, 16))


# ---------------------------------------------------------------- grids

def test_grid_validation():
    with pytest.raises(ValueError):
        disc.XGrid(2, 16, "sphere")
    with pytest.raises(ValueError):
        disc.XGrid(3, 16)
    with pytest.raises(ValueError):
        disc.torus_grid(4, 16)
    with pytest.raises(ValueError):
        disc.Grid2x1(disc.XGrid(1, 16), 16)


def test_grid_geometry():
    g = disc.XGrid(2, 8, "box", 2.0)
    assert g.h == pytest.approx(4.0 / 7)
    assert g.points().shape == (64, 2)
    assert g.axis[0] == -2.0 and g.axis[-1] == pytest.approx(2.0)
    t = disc.XGrid(1, 8)
    assert t.axis[-1] == pytest.approx(2 * np.pi * 7 / 8)


def test_box_boundary_mass():
    pot = model.quadratic_potential([1.0, 1.0])
    assert disc.XGrid(2, 40, "box", 6.0).boundary_mass(pot) < 1e-8
    assert disc.XGrid(2, 40, "box", 1.5).boundary_mass(pot) > 1e-3
    assert disc.XGrid(2, 40).boundary_mass(model.torus_potential(1.0)) == 0.0


def test_discretize_checks_model():
    with pytest.raises(ValueError):
        disc.discretize_fiber(model.FiberModel(2, 1.0, model.quadratic_potential([1.0, 1.0])),
                              disc.torus_grid(16, 16))
    with pytest.raises(ValueError):
        disc.discretize_fiber(model.FiberModel(3, 1.0, model.quadratic_potential([1.0] * 3)),
                              disc.box_grid(16, 16, 5.0))


# ---------------------------------------------------------------- discrete structure

def test_torus_discretization_structure(torus16):
    _, ops = torus16
    rep = hypo.check_structure(ops)
    assert rep.ok, rep.lines()
    assert sp.issparse(ops.S) and sp.issparse(ops.A)


def test_box_discretization_structure():
    m = model.FiberModel(2, 0.8, model.quadratic_potential([1.0, 0.5]))
    ops = disc.discretize_fiber(m, disc.box_grid(12, 12, 5.0))
    rep = hypo.check_structure(ops)
    assert rep.ok, rep.lines()


def test_unstabilized_transport_has_null_modes():
    m = torus_model()
    ops0 = disc.discretize_fiber(m, disc.torus_grid(16, 16), stabilization=0.0)
    ops1 = disc.discretize_fiber(m, disc.torus_grid(16, 16), stabilization=1.0)
    assert hypo.check_structure(ops0).ok
    assert hypo._lambda_M(ops0) < 1e-8
    assert hypo._lambda_M(ops1) > 0.3


def test_lambda_m_equals_discrete_angle_eigenvalue(torus16):
    m, ops = torus16
    h = 2 * np.pi / 16
    assert hypo._lambda_m(ops) == pytest.approx(m.sigma**2 * (1 - np.cos(h)) / h**2, rel=1e-9)


@pytest.mark.parametrize("sigma", [0.5, 1.0, 2.0])
def test_discrete_M1_relation_is_exact(sigma):
    m = torus_model(1.0, sigma)
    grid = disc.torus_grid(12, 16)
    ops = disc.discretize_fiber(m, grid)
    m1, res = hypo.fit_M1(ops)
    assert m1 == pytest.approx(disc.discrete_M1(m, grid), rel=1e-10)
    assert res < 1e-10
    assert disc.discrete_M1(m, disc.torus_grid(12, 256)) == pytest.approx(-sigma**2 / 2, rel=1e-4)


def test_macroscopic_operator_is_weighted_laplacian():
    # on x-functions P A² P ≈ (1/2)(Δ - ∇V·∇); check on a smooth function, flat torus
    m = torus_model(0.0)
    ops = disc.discretize_fiber(m, disc.torus_grid(32, 16))
    pts = disc.XGrid(2, 32).points()
    f = np.cos(pts[:, 0]) * np.sin(2 * pts[:, 1])
    lap = -5.0 * f  # Δf
    got = disc.discrete_PA2P(ops) @ f
    assert np.max(np.abs(got - 0.5 * lap)) < 0.1 * np.max(np.abs(lap))


# ---------------------------------------------------------------- Poincaré constant

def test_gaussian_1d_gap():
    pot = model.quadratic_potential([0.5])  # e^{-x²/2}
    assert disc.poincare_constant(pot, disc.XGrid(1, 400, "box", 9.0)) == pytest.approx(1.0, rel=1e-3)


def test_flat_torus_gap_converges_to_one():
    pot = model.torus_potential(0.0)
    vals = [disc.poincare_constant(pot, disc.XGrid(2, n)) for n in (16, 32)]
    # centered second difference: (2 - 2cos h)/h² on the first mode
    for n, v in zip((16, 32), vals):
        h = 2 * np.pi / n
        assert v == pytest.approx((2 - 2 * np.cos(h)) / h**2, rel=1e-2)


def test_gap_dimension_mismatch():
    with pytest.raises(ValueError):
        disc.poincare_constant(model.quadratic_potential([1.0]), disc.XGrid(2, 10, "box", 3.0))


# ---------------------------------------------------------------- elliptic problem

def test_elliptic_manufactured_solution():
    pot = model.torus_potential(0.0)
    errs = []
    for n in (16, 32):
        xg = disc.XGrid(2, n)
        pts = xg.points()
        u = np.cos(pts[:, 0]) + 0.5 * np.sin(pts[:, 0] + pts[:, 1])
        lap = -np.cos(pts[:, 0]) - 1.0 * np.sin(pts[:, 0] + pts[:, 1])
        c1 = 0.5
        g = u - c1 * lap
        errs.append(np.max(np.abs(disc.elliptic_solve(disc.EllipticProblem(xg, pot, c1), g) - u)))
    assert errs[1] < 1e-2
    assert errs[0] / errs[1] > 3.5  # second order


def test_elliptic_requires_mean_zero():
    xg = disc.XGrid(2, 8)
    with pytest.raises(ValueError):
        disc.elliptic_solve(disc.EllipticProblem(xg, model.torus_potential(1.0)), np.ones(xg.size))
    with pytest.raises(ValueError):
        disc.EllipticProblem(xg, model.torus_potential(1.0), c1=0.0)


def test_n2_ratio_flat_torus_oracle():
    # u = cos x₁ solves u - c₁Δu = (1 + c₁) cos x₁; |∇²u| = |u| and ∇V = 0, so r = 1/(1 + c₁)
    xg = disc.XGrid(2, 64)
    pts = xg.points()
    u = np.cos(pts[:, 0])
    c1 = 0.5
    r = disc.n2_ratio(u, (1 + c1) * u, model.torus_potential(0.0), xg, 2)
    # nested central differences have symbol sin²h/h² on the first mode
    h = xg.h
    assert r == pytest.approx(np.sin(h) ** 2 / h**2 / (1 + c1), rel=1e-10)
    assert r == pytest.approx(1 / (1 + c1), rel=h**2)


def test_estimate_N2_is_finite_and_seeded():
    m = torus_model()
    xg = disc.XGrid(2, 16)
    a = disc.estimate_N2(m, xg, 4, np.random.default_rng(0))
    b = disc.estimate_N2(m, xg, 4, np.random.default_rng(0))
    assert np.isfinite(a) and a > 0 and a == b
    with pytest.raises(ValueError):
        disc.estimate_N2(m, xg, 0, np.random.default_rng(0))


# ---------------------------------------------------------------- export

def test_triplet_roundtrip(tmp_path, torus16):
    _, ops = torus16
    path = tmp_path / "A.txt"
    disc.export_triplets(ops.A, path)
    first = path.read_text().splitlines()[0].split()
    assert int(first[0]) == ops.dim and int(first[2]) == sp.coo_matrix(ops.A).nnz
    back = disc.read_triplets(path)
    assert abs(back - ops.A).max() == 0.0


def test_fingerprint_changes_with_operator(torus16):
    _, ops = torus16
    other = dataclasses.replace(ops, S=ops.S * 2.0)
    assert ops.fingerprint() != other.fingerprint()


def test_BS_equals_M1_B_and_N1_bound():
    m = torus_model(1.0, 1.3)
    grid = disc.torus_grid(8, 8)
    ops = disc.discretize_fiber(m, grid)
    B = hypo.build_B(ops, "dense").to_dense()
    m1 = disc.discrete_M1(m, grid)
    BS = B @ ops.S.toarray()
    assert hypo.weighted_norm(BS - m1 * B, ops.space) < 1e-10
    n1 = hypo.measure_constants(ops, hypo.build_B(ops)).n1
    assert n1 <= abs(m1) / 2 + 1e-12
