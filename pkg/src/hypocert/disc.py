"""Grid discretization of the planar (d = 2) fiber generator.

State ``(x1, x2, α)`` lives on a tensor grid; the velocity is
ω(α) = (cos α, sin α).  The transport part is assembled in flux form,

    ρ A f ≈ -q · ∇_{(x, α)} f,     q = (ρ ω, -ρ ∂_α Φ),   div q = 0,

with the discrete flux obtained as the discrete curl of the vector potential
ψ = ρ(x) (cos α, sin α, 0) on staggered points.  The discrete divergence of a
discrete curl vanishes identically, so the assembled ``A`` is exactly
weighted-antisymmetric, annihilates constants and leaves μ invariant.  The
α-sums of the x-fluxes telescope, which makes ``P A P`` vanish exactly.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import Optional

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from . import hypo
from .model import FiberModel, Potential

log = logging.getLogger(__name__)

DENSE_EIG_LIMIT = 4000
MIN_NODES = 8


@dataclass(frozen=True)
class XGrid:
    """Tensor grid for the position variable.

    ``mode="torus"``: n nodes per axis on [0, 2π), periodic.
    ``mode="box"``: n nodes per axis on [-half_width, half_width].
    """

    dim: int
    n: int
    mode: str = "torus"
    half_width: float = np.pi

    def __post_init__(self):
        if self.mode not in ("torus", "box"):
            raise ValueError(f"unknown grid mode {self.mode!r}")
        if self.dim not in (1, 2):
            raise ValueError("x-grids are 1-d or 2-d")
        if self.n < 3:
            raise ValueError("need at least 3 nodes per axis")

    @property
    def periodic(self) -> bool:
        return self.mode == "torus"

    @property
    def h(self) -> float:
        if self.periodic:
            return 2.0 * np.pi / self.n
        return 2.0 * self.half_width / (self.n - 1)

    @property
    def axis(self) -> np.ndarray:
        if self.periodic:
            return self.h * np.arange(self.n)
        return -self.half_width + self.h * np.arange(self.n)

    @property
    def size(self) -> int:
        return self.n**self.dim

    def points(self) -> np.ndarray:
        """Node coordinates, shape (size, dim), first axis slowest."""
        axes = np.meshgrid(*([self.axis] * self.dim), indexing="ij")
        return np.stack([a.ravel() for a in axes], axis=-1)

    def density(self, pot: Potential) -> np.ndarray:
        """Nodal weights of e^{-V}dx, renormalized to sum to one."""
        v = pot.value(self.points())
        rho = np.exp(-(v - v.min()))
        return rho / rho.sum()

    def boundary_mass(self, pot: Potential, layers: int = 3) -> float:
        """μ-mass within ``layers`` grid spacings of the box boundary."""
        if self.periodic:
            return 0.0
        rho = self.density(pot).reshape((self.n,) * self.dim)
        idx = np.arange(self.n)
        near = (idx < layers) | (idx >= self.n - layers)
        mask = np.zeros(rho.shape, dtype=bool)
        for k in range(self.dim):
            shape = [1] * self.dim
            shape[k] = self.n
            mask |= near.reshape(shape)
        return float(rho[mask].sum())


@dataclass(frozen=True)
class Grid2x1:
    """Phase-space grid: 2-d x-grid times a uniform angle grid."""

    x: XGrid
    n_alpha: int

    def __post_init__(self):
        if self.x.dim != 2:
            raise ValueError("the fiber discretization needs a 2-d x-grid")
        if self.n_alpha < MIN_NODES or self.x.n < MIN_NODES:
            raise ValueError(f"grid too coarse: need n_alpha >= {MIN_NODES} and n_x >= {MIN_NODES}")

    @property
    def h_alpha(self) -> float:
        return 2.0 * np.pi / self.n_alpha

    @property
    def alpha(self) -> np.ndarray:
        return self.h_alpha * np.arange(self.n_alpha)

    @property
    def size(self) -> int:
        return self.x.size * self.n_alpha

    def index(self, i1, i2, a):
        return (np.asarray(i1) * self.x.n + np.asarray(i2)) * self.n_alpha + np.asarray(a)


def torus_grid(n_x: int, n_alpha: int) -> Grid2x1:
    return Grid2x1(XGrid(2, n_x, "torus"), n_alpha)


def box_grid(n_x: int, n_alpha: int, half_width: float) -> Grid2x1:
    return Grid2x1(XGrid(2, n_x, "box", half_width), n_alpha)


# ---------------------------------------------------------------------------
# assembly


def _periodic_second_difference(n: int, h: float) -> sp.csr_matrix:
    main = np.full(n, -2.0)
    off = np.ones(n - 1)
    D = sp.diags([main, off, off], [0, 1, -1], shape=(n, n), format="lil")
    D[0, n - 1] = 1.0
    D[n - 1, 0] = 1.0
    return (D.tocsr()) / h**2


def _check_model(model: FiberModel, grid: Grid2x1):
    if model.d != 2:
        raise ValueError("grid discretization is implemented for d = 2 only")
    if model.potential.dim != 2:
        raise ValueError("potential must be defined on R^2")
    if grid.x.periodic and not model.potential.periodic:
        raise ValueError("torus mode needs a 2π-periodic potential")


def _rho(pot: Potential, x1, x2):
    """Unnormalized e^{-V} at arbitrary points (broadcasting)."""
    pts = np.stack(np.broadcast_arrays(x1, x2), axis=-1)
    return np.exp(-(pot.value(pts) - pot.log_normalizer))


def discretize_fiber(model: FiberModel, grid: Grid2x1, stabilization: float = 1.0) -> hypo.OperatorSet:
    """Assemble S, A and the velocity-average basis as sparse matrices.

    Returns an :class:`hypo.OperatorSet` whose weighted space carries the
    μ-masses of the grid nodes.  ``stabilization`` scales the skew coupling
    that removes the odd-even null modes of the centered transport stencil
    (0 disables it).
    """
    _check_model(model, grid)
    pot = model.potential
    nx, na = grid.x.n, grid.n_alpha
    h, ha = grid.x.h, grid.h_alpha
    xs = grid.x.axis
    al = grid.alpha
    periodic = grid.x.periodic

    # node density and weights (α-uniform)
    X1, X2 = np.meshgrid(xs, xs, indexing="ij")
    rho = _rho(pot, X1, X2)  # (nx, nx)
    weights = np.repeat((rho / rho.sum()).ravel(), na) / na
    weights = weights / weights.sum()
    space = hypo.WeightedSpace(weights)

    # staggered positions: x half points and α half points
    xh = xs + 0.5 * h  # i + 1/2
    ah = al + 0.5 * ha  # a + 1/2
    c_ah, s_ah = np.cos(ah), np.sin(ah)

    # ψ₂ = ρ sin α at (i1+½, i2, a+½); ψ₁ = ρ cos α at (i1, i2+½, a+½)
    rho_h1 = _rho(pot, xh[:, None], xs[None, :])  # (nx, nx) at i1+½
    rho_h2 = _rho(pot, xs[:, None], xh[None, :])  # at i2+½
    if not periodic:
        # zero-flux closure: no vector potential beyond the last node
        rho_h1[-1, :] = 0.0
        rho_h2[:, -1] = 0.0
    psi2 = rho_h1[:, :, None] * s_ah[None, None, :]  # (i1+½, i2, a+½)
    psi1 = rho_h2[:, :, None] * c_ah[None, None, :]  # (i1, i2+½, a+½)

    # q¹ at (i1+½, i2, a): -(ψ₂(a+½) - ψ₂(a-½))/h_α
    q1 = -(psi2 - np.roll(psi2, 1, axis=2)) / ha
    # q² at (i1, i2+½, a): (ψ₁(a+½) - ψ₁(a-½))/h_α
    q2 = (psi1 - np.roll(psi1, 1, axis=2)) / ha
    # q³ at (i1, i2, a+½): (ψ₂(i1+½) - ψ₂(i1-½))/h - (ψ₁(i2+½) - ψ₁(i2-½))/h
    psi2_m = np.roll(psi2, 1, axis=0)
    psi1_m = np.roll(psi1, 1, axis=1)
    if not periodic:
        psi2_m[0] = 0.0
        psi1_m[:, 0] = 0.0
    q3 = (psi2 - psi2_m) / h - (psi1 - psi1_m) / h

    I1, I2, Aa = np.meshgrid(np.arange(nx), np.arange(nx), np.arange(na), indexing="ij")
    rows, cols, vals = [], [], []

    def couple(q, step, shift_axis, hk):
        # M[i, i+e] = q_{i+½}/(2h), M[i+e, i] = -q_{i+½}/(2h)
        J = [I1, I2, Aa]
        tgt = list(J)
        n_axis = na if shift_axis == 2 else nx
        nxt = J[shift_axis] + 1
        if shift_axis == 2 or periodic:
            valid = np.ones(nxt.shape, dtype=bool)
            nxt = nxt % n_axis
        else:
            valid = nxt < n_axis
        tgt[shift_axis] = nxt
        src = grid.index(*J)[valid]
        dst = grid.index(*tgt)[valid]
        val = q[valid] / (2.0 * hk)
        rows.extend([src, dst])
        cols.extend([dst, src])
        vals.extend([val, -val])

    couple(q1, 1, 0, h)
    couple(q2, 1, 1, h)
    couple(q3, 1, 2, ha)
    if stabilization:
        _stabilizer(pot, grid, stabilization, rows, cols, vals)
    n = grid.size
    M = sp.csr_matrix(
        (np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))), shape=(n, n)
    )
    rho_nodes = np.repeat(rho.ravel(), na)
    A = (sp.diags(1.0 / rho_nodes) @ M).tocsr()

    S = sp.kron(
        sp.identity(nx * nx, format="csr"),
        0.5 * model.sigma**2 * _periodic_second_difference(na, ha),
        format="csr",
    )

    # basis of velocity averages: normalized indicators of the α-fibres
    mass_x = (rho / rho.sum()).ravel()
    col = np.repeat(np.arange(nx * nx), na)
    U = sp.csr_matrix((1.0 / np.sqrt(mass_x[col]), (np.arange(n), col)), shape=(n, nx * nx))
    label = f"fiber-{grid.x.mode}-{nx}x{nx}x{na}"
    return hypo.OperatorSet(space, S, A, U, label=label)


_STAB_STENCIL = ((1, -4.0), (2, 1.0))  # fourth difference as Σ β_j (f_{i+j} + f_{i-j} - 2 f_i)


def _stabilizer(pot, grid: Grid2x1, strength, rows, cols, vals):
    """Skew coupling between x-neighbours and adjacent angles.

    Centered antisymmetric stencils annihilate the grid-scale alternating
    modes of velocity-averaged functions.  For each axis k this adds pairs

        M[(i, a), (i + j e_k, b)] = β_j ρ_{i + j/2} R_ab,   R antisymmetric,

    with the same block mirrored antisymmetrically and a compensating block
    at (i, i) so that rows still sum to zero.  R couples a to a ± 1 and
    R·1 = κ e_k^⊥·ω(α) is a first angular harmonic with zero mean, which keeps
    P A P = 0 and P A S = M₁ P A exact.  On velocity-averaged functions the
    extra term is κ-weighted fourth differences (consistency O(h³)).
    """
    xg = grid.x
    nx, na, h, ha = xg.n, grid.n_alpha, xg.h, grid.h_alpha
    xs = xg.axis
    ah = grid.alpha + 0.5 * ha
    kappa = strength / (8.0 * h)
    # t_{a+½} with t_{a+½} - t_{a-½} = κ·(sin α, cos α)_k
    t_axis = (
        -kappa * np.cos(ah) / (2.0 * np.sin(0.5 * ha)),
        kappa * np.sin(ah) / (2.0 * np.sin(0.5 * ha)),
    )
    I1, I2, Aa = np.meshgrid(np.arange(nx), np.arange(nx), np.arange(na), indexing="ij")
    a_next = (Aa + 1) % na
    diag = [np.zeros((nx, nx)) for _ in range(2)]  # accumulated ρ-weights per axis
    for k in range(2):
        t = t_axis[k][Aa]
        for j, beta in _STAB_STENCIL:
            # ρ at the midpoint between i and i + j e_k
            mid = [xs[:, None] + 0.0 * xs[None, :], xs[None, :] + 0.0 * xs[:, None]]
            mid[k] = mid[k] + 0.5 * j * h
            rho_mid = _rho(pot, mid[0], mid[1])
            J = [I1, I2]
            nxt = J[k] + j
            if xg.periodic:
                valid = np.ones(nxt.shape, dtype=bool)
                nxt = nxt % nx
            else:
                valid = nxt < nx
                rho_mid = np.where(valid[:, :, 0], rho_mid, 0.0)
            tgt = list(J)
            tgt[k] = nxt
            w = beta * rho_mid[:, :, None] * t  # weight of the (a, a+1) entry
            for src_a, dst_a, sign in ((Aa, a_next, 1.0), (a_next, Aa, -1.0)):
                src = grid.index(I1, I2, src_a)[valid]
                dst = grid.index(tgt[0], tgt[1], dst_a)[valid]
                val = sign * w[valid]
                rows.extend([src, dst])
                cols.extend([dst, src])
                vals.extend([val, -val])
            # compensation at (i, i) and (i + j e_k, i + j e_k)
            wv = np.where(valid[:, :, 0], beta * rho_mid, 0.0)
            diag[k] += wv
            shifted = np.zeros_like(wv)
            if xg.periodic:
                shifted = np.roll(wv, j, axis=k)
            else:
                sl_src = [slice(None)] * 2
                sl_dst = [slice(None)] * 2
                sl_src[k] = slice(0, nx - j)
                sl_dst[k] = slice(j, nx)
                shifted[tuple(sl_dst)] = wv[tuple(sl_src)]
            diag[k] += shifted
    for k in range(2):
        w = -diag[k][:, :, None] * t_axis[k][Aa]
        src = grid.index(I1, I2, Aa).ravel()
        dst = grid.index(I1, I2, a_next).ravel()
        rows.extend([src, dst])
        cols.extend([dst, src])
        vals.extend([w.ravel(), -w.ravel()])


def discrete_M1(model: FiberModel, grid: Grid2x1) -> float:
    """Eigenvalue of the discrete S on the first angular harmonics."""
    return -(model.sigma**2 / grid.h_alpha**2) * (1.0 - np.cos(grid.h_alpha))


# ---------------------------------------------------------------------------
# x-space operators


def _flux_laplacian(pot: Potential, xg: XGrid) -> sp.csr_matrix:
    """Weighted Laplacian G u = ρ^{-1} div(ρ ∇u) on the x-grid (flux form).

    ρ_{i±½} is evaluated at cell faces; in box mode the outer fluxes are
    dropped (natural boundary condition).
    """
    n, h = xg.n, xg.h
    pts = xg.points()
    rho = np.exp(-(pot.value(pts) - pot.log_normalizer))
    N = xg.size
    shape = (n,) * xg.dim
    idx = np.arange(N).reshape(shape)
    rows, cols, vals = [], [], []
    for k in range(xg.dim):
        face = pts.copy()
        face[:, k] += 0.5 * h
        rho_f = np.exp(-(pot.value(face) - pot.log_normalizer)).reshape(shape)
        nxt = np.roll(idx, -1, axis=k)
        valid = np.ones(shape, dtype=bool)
        if not xg.periodic:
            sl = [slice(None)] * xg.dim
            sl[k] = -1
            valid[tuple(sl)] = False
        a = idx[valid]
        b = nxt[valid]
        c = rho_f[valid] / h**2
        # symmetric form ρG: off-diagonals c, diagonals -c
        rows.extend([a, b, a, b])
        cols.extend([b, a, a, b])
        vals.extend([c, c, -c, -c])
    K = sp.csr_matrix(
        (np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))), shape=(N, N)
    )
    return (sp.diags(1.0 / rho) @ K).tocsr(), rho


def weighted_laplacian(pot: Potential, xg: XGrid):
    """Return ``(G, ρ)`` with G ≈ Δ - ∇V·∇ and ρ the nodal e^{-V}."""
    return _flux_laplacian(pot, xg)


def poincare_constant(pot: Potential, xg: XGrid) -> float:
    """Spectral gap of -(Δ - ∇V·∇) in L²(e^{-V}dx) on the grid."""
    if pot.dim != xg.dim:
        raise ValueError("potential and grid dimensions differ")
    G, rho = _flux_laplacian(pot, xg)
    r = np.sqrt(rho)
    # D^{1/2} (-G) D^{-1/2} is symmetric; its kernel is spanned by sqrt(ρ)
    H = (sp.diags(r) @ (-G) @ sp.diags(1.0 / r)).tocsr()
    H = 0.5 * (H + H.T)
    if xg.size <= DENSE_EIG_LIMIT:
        v = r / np.linalg.norm(r)
        Hd = H.toarray()
        Hd = Hd + (np.abs(Hd).sum(axis=1).max() + 1.0) * np.outer(v, v)
        return float(np.linalg.eigvalsh(Hd)[0])
    try:
        vals = spla.eigsh(H, k=3, sigma=-1.0, which="LM", return_eigenvectors=False)
    except Exception as exc:  # ARPACK failure
        raise RuntimeError(f"eigen-solver failure: {exc}") from exc
    vals = np.sort(vals)
    return float(vals[1])


@dataclass(frozen=True)
class EllipticProblem:
    """u - c₁(Δu - ∇V·∇u) = g on an x-grid."""

    grid: XGrid
    potential: Potential
    c1: float = 0.5

    def __post_init__(self):
        if not self.c1 > 0:
            raise ValueError("c1 must be positive")


def elliptic_solve(prob: EllipticProblem, g, tol: float = 1e-10) -> np.ndarray:
    G, rho = _flux_laplacian(prob.potential, prob.grid)
    mu = rho / rho.sum()
    g = np.asarray(g, dtype=float)
    if abs(mu @ g) > 1e-10 * max(1.0, np.sqrt(mu @ g**2)):
        raise ValueError("right-hand side must have zero μ-mean")
    M = (sp.identity(G.shape[0], format="csr") - prob.c1 * G).tocsc()
    u = spla.spsolve(M, g)
    res = np.linalg.norm(M @ u - g) / max(np.linalg.norm(g), 1e-300)
    if not np.isfinite(res) or res > tol:
        raise RuntimeError(f"elliptic solve residual {res:.2e} exceeds {tol:.0e}")
    return u - mu @ u


def _grad_hess(u, xg: XGrid):
    """Central-difference gradient and Hessian on the (periodic) grid."""
    n, h, d = xg.n, xg.h, xg.dim
    U = u.reshape((n,) * d)

    def D(F, k):
        if xg.periodic:
            return (np.roll(F, -1, axis=k) - np.roll(F, 1, axis=k)) / (2 * h)
        return np.gradient(F, h, axis=k, edge_order=2)

    grad = [D(U, k) for k in range(d)]
    hess = [[D(grad[i], j) for j in range(d)] for i in range(d)]
    return grad, hess


def n2_ratio(u, g, pot: Potential, xg: XGrid, d: int) -> float:
    """(|∇²u| + |∇V||∇u|/(d-1)) / |g| in L²(e^{-V}dx)."""
    rho = np.exp(-(pot.value(xg.points()) - pot.log_normalizer))
    mu = rho / rho.sum()
    grad, hess = _grad_hess(u, xg)
    h2 = sum(hess[i][j] ** 2 for i in range(xg.dim) for j in range(xg.dim)).ravel()
    gu = np.sqrt(sum(gk**2 for gk in grad)).ravel()
    gv = np.linalg.norm(pot.gradient(xg.points()), axis=-1)
    num = np.sqrt(mu @ h2) + np.sqrt(mu @ (gv * gu) ** 2) / (d - 1)
    return float(num / np.sqrt(mu @ g**2))


def random_smooth_field(xg: XGrid, rng: np.random.Generator, modes: int = 3) -> np.ndarray:
    """Random trigonometric polynomial of degree ≤ ``modes`` on the grid."""
    pts = xg.points()
    L = 2.0 * np.pi if xg.periodic else 2.0 * xg.half_width
    g = np.zeros(pts.shape[0])
    ks = np.array(np.meshgrid(*([np.arange(-modes, modes + 1)] * xg.dim), indexing="ij")).reshape(xg.dim, -1).T
    ks = ks[np.any(ks != 0, axis=1)]
    for k in ks:
        phase = 2.0 * np.pi * (pts @ k) / L
        g += rng.standard_normal() * np.cos(phase) + rng.standard_normal() * np.sin(phase)
    return g


def estimate_N2(model: FiberModel, xg: XGrid, samples: int, rng: np.random.Generator,
                modes: int = 3) -> float:
    """max over random mean-zero g of the regularity ratio r(g).

    For each g the elliptic problem with c₁ = 1/d is solved and the Hessian
    plus weighted-gradient norm of the solution is compared with |g|.
    """
    if samples < 1:
        raise ValueError("samples must be positive")
    pot = model.potential
    prob = EllipticProblem(xg, pot, 1.0 / model.d)
    rho = np.exp(-(pot.value(xg.points()) - pot.log_normalizer))
    mu = rho / rho.sum()
    best = 0.0
    for _ in range(samples):
        g = random_smooth_field(xg, rng, modes)
        g -= mu @ g
        u = elliptic_solve(prob, g)
        best = max(best, n2_ratio(u, g, pot, xg, model.d))
    return best


# ---------------------------------------------------------------------------
# macroscopic operator


def discrete_PA2P(ops: hypo.OperatorSet) -> np.ndarray:
    """P A² P as a matrix on x-grid functions (velocity-independent vectors).

    The basis column j is the indicator of the j-th α-fibre scaled by
    μ_x(j)^{-1/2}; x-functions are mapped in and out of those coordinates.
    """
    w = ops.space.weights
    U = ops.basis
    mass = np.asarray(U.T @ w).ravel() ** 2  # (U^T W 1)_j² = μ_x(j)
    Kp = hypo.macroscopic_matrix(ops)
    r = np.sqrt(mass)
    return -(Kp * r[None, :]) / r[:, None]


# ---------------------------------------------------------------------------
# export


def export_triplets(M, path, fmt: str = "%.17g") -> None:
    """Write a sparse matrix as 1-based ``row col value`` lines.

    The first line holds ``rows cols nnz``.
    """
    C = sp.coo_matrix(M)
    order = np.lexsort((C.col, C.row))
    with open(path, "w", encoding="ascii") as fh:
        fh.write(f"{C.shape[0]} {C.shape[1]} {C.nnz}\n")
        for r, c, v in zip(C.row[order], C.col[order], C.data[order]):
            fh.write(f"{r + 1} {c + 1} {fmt % v}\n")


def read_triplets(path) -> sp.csr_matrix:
    with open(path, encoding="ascii") as fh:
        nr, nc, _ = (int(t) for t in fh.readline().split())
        data = np.loadtxt(fh, ndmin=2)
    if data.size == 0:
        return sp.csr_matrix((nr, nc))
    return sp.csr_matrix((data[:, 2], (data[:, 0].astype(int) - 1, data[:, 1].astype(int) - 1)), shape=(nr, nc))
