"""Geometry and quadrature on the unit sphere S^{d-1} embedded in R^d.

Functions on the sphere are handled through ambient extensions: an
:class:`AmbientFunction` carries value/gradient/Hessian evaluators defined on
all of R^d, and the spherical operators project those derivatives onto the
tangent space.  All evaluators are expected to broadcast over leading axes,
so a batch of points has shape ``(..., d)``.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Optional

import numpy as np

UNIT_TOL = 1e-12


def unit_vector(coords, tol: float = 1e-8) -> np.ndarray:
    """Return ``coords`` renormalized to unit length.

    Raises ``ValueError`` if d < 2 or if the input is too far from the
    sphere (more than ``tol``) or numerically zero.
    """
    w = np.asarray(coords, dtype=float)
    if w.shape[-1] < 2:
        raise ValueError("sphere dimension requires d >= 2")
    r = np.linalg.norm(w, axis=-1, keepdims=True)
    if np.any(r < 1e-300):
        raise ValueError("cannot normalize a zero vector")
    if np.any(np.abs(r - 1.0) > tol):
        raise ValueError("coordinates are not on the unit sphere")
    return w / r


@dataclass(frozen=True)
class AmbientFunction:
    """A smooth function on R^d used as the extension of a function on S.

    ``hessian`` is optional; it is only needed for second-order operators.
    """

    value: Callable[[np.ndarray], np.ndarray]
    gradient: Callable[[np.ndarray], np.ndarray]
    hessian: Optional[Callable[[np.ndarray], np.ndarray]] = None


def linear_function(z) -> AmbientFunction:
    """f(w) = (z, w)."""
    z = np.asarray(z, dtype=float)
    d = z.size
    return AmbientFunction(
        value=lambda w: np.asarray(w) @ z,
        gradient=lambda w: np.broadcast_to(z, np.shape(w)).copy(),
        hessian=lambda w: np.zeros(np.shape(w)[:-1] + (d, d)),
    )


def quadratic_function(B) -> AmbientFunction:
    """f(w) = (Bw, w) for a square matrix B (not necessarily symmetric)."""
    B = np.asarray(B, dtype=float)
    Bs = B + B.T

    return AmbientFunction(
        value=lambda w: np.einsum("...i,ij,...j->...", w, B, w),
        gradient=lambda w: np.asarray(w) @ Bs.T,
        hessian=lambda w: np.broadcast_to(Bs, np.shape(w)[:-1] + Bs.shape).copy(),
    )


def constant_function(c: float, d: int) -> AmbientFunction:
    return AmbientFunction(
        value=lambda w: np.full(np.shape(w)[:-1], float(c)),
        gradient=lambda w: np.zeros(np.shape(w)),
        hessian=lambda w: np.zeros(np.shape(w)[:-1] + (d, d)),
    )


def monomial(powers) -> AmbientFunction:
    """f(w) = prod_i w_i**p_i with exact first and second derivatives."""
    p = np.asarray(powers, dtype=int)
    d = p.size

    def _mono(w, q):
        if np.any(q < 0):
            return np.zeros(np.shape(w)[:-1])
        return np.prod(np.asarray(w, dtype=float) ** q, axis=-1)

    def value(w):
        return _mono(w, p)

    def gradient(w):
        out = np.empty(np.shape(w))
        for i in range(d):
            q = p.copy()
            q[i] -= 1
            out[..., i] = p[i] * _mono(w, q)
        return out

    def hessian(w):
        out = np.empty(np.shape(w)[:-1] + (d, d))
        for i in range(d):
            for j in range(d):
                q = p.copy()
                q[i] -= 1
                c = p[i]
                c *= q[j]
                q[j] -= 1
                out[..., i, j] = c * _mono(w, q)
        return out

    return AmbientFunction(value, gradient, hessian)


def polynomial(terms) -> AmbientFunction:
    """Linear combination of monomials: ``terms`` is a list of (coef, powers)."""
    parts = [(float(c), monomial(pw)) for c, pw in terms]

    def value(w):
        return sum(c * m.value(w) for c, m in parts)

    def gradient(w):
        return sum(c * m.gradient(w) for c, m in parts)

    def hessian(w):
        return sum(c * m.hessian(w) for c, m in parts)

    return AmbientFunction(value, gradient, hessian)


def product(f: AmbientFunction, g: AmbientFunction) -> AmbientFunction:
    def value(w):
        return f.value(w) * g.value(w)

    def gradient(w):
        return f.value(w)[..., None] * g.gradient(w) + g.value(w)[..., None] * f.gradient(w)

    hess = None
    if f.hessian is not None and g.hessian is not None:

        def hess(w):
            fg, gg = f.gradient(w), g.gradient(w)
            cross = fg[..., :, None] * gg[..., None, :]
            return (
                f.value(w)[..., None, None] * g.hessian(w)
                + g.value(w)[..., None, None] * f.hessian(w)
                + cross
                + np.swapaxes(cross, -1, -2)
            )

    return AmbientFunction(value, gradient, hess)


# ---------------------------------------------------------------------------
# differential operators


def project_tangent(omega, v) -> np.ndarray:
    """Apply (I - w w^T) to ``v``; broadcasts over leading axes."""
    omega = np.asarray(omega, dtype=float)
    v = np.asarray(v, dtype=float)
    if omega.shape[-1] != v.shape[-1]:
        raise ValueError(f"dimension mismatch: {omega.shape[-1]} vs {v.shape[-1]}")
    return v - omega * np.sum(omega * v, axis=-1, keepdims=True)


def spherical_gradient(f: AmbientFunction, omega) -> np.ndarray:
    return project_tangent(omega, f.gradient(omega))


def laplace_beltrami(f: AmbientFunction, omega) -> np.ndarray:
    """Laplace-Beltrami of the restriction of ``f`` to the sphere.

    Uses the closed form ``Δf - w^T ∇²f w - (d-1) w·∇f``, which agrees with
    the sum of squared tangential fields S_n = (I - w w^T) e_n · ∇ on S.
    """
    if f.hessian is None:
        raise ValueError("laplace_beltrami needs a hessian evaluator")
    omega = np.asarray(omega, dtype=float)
    d = omega.shape[-1]
    H = f.hessian(omega)
    g = f.gradient(omega)
    trace = np.trace(H, axis1=-2, axis2=-1)
    radial = np.einsum("...i,...ij,...j->...", omega, H, omega)
    return trace - radial - (d - 1) * np.sum(omega * g, axis=-1)


_FD_COEF = np.array([1.0, -8.0, 8.0, -1.0]) / 12.0
_FD_OFFS = np.array([-2.0, -1.0, 1.0, 2.0])


def laplace_beltrami_nested(f: AmbientFunction, omega, h: float = 1e-3) -> np.ndarray:
    """Σ_n S_n(S_n f) evaluated by differentiating S_n f numerically.

    The inner field S_n f is taken from the analytic gradient; the outer
    derivative uses a fourth-order central difference in the ambient space.
    Independent cross-check of :func:`laplace_beltrami`.
    """
    omega = np.asarray(omega, dtype=float)
    d = omega.shape[-1]
    eye = np.eye(d)

    def sn_f(w, n):
        # S_n f as an ambient function, valid off the sphere as well
        return np.sum(project_tangent(w, eye[n]) * f.gradient(w), axis=-1)

    total = np.zeros(omega.shape[:-1])
    for n in range(d):
        tang = project_tangent(omega, eye[n])
        grad = np.zeros(omega.shape)
        for j in range(d):
            acc = np.zeros(omega.shape[:-1])
            for c, o in zip(_FD_COEF, _FD_OFFS):
                acc = acc + c * sn_f(omega + o * h * eye[j], n)
            grad[..., j] = acc / h
        total = total + np.sum(tang * grad, axis=-1)
    return total


# ---------------------------------------------------------------------------
# quadrature


@dataclass(frozen=True)
class SphereQuadrature:
    """Nodes on S^{d-1} and positive weights summing to one (measure ν)."""

    nodes: np.ndarray
    weights: np.ndarray
    kind: str

    def __post_init__(self):
        if self.nodes.ndim != 2 or self.nodes.shape[0] != self.weights.size:
            raise ValueError("nodes/weights shape mismatch")
        if np.any(self.weights <= 0):
            raise ValueError("weights must be positive")
        if abs(self.weights.sum() - 1.0) > 1e-12:
            raise ValueError("weights must sum to 1")

    @property
    def dim(self) -> int:
        return self.nodes.shape[1]

    def integrate(self, values) -> float:
        return float(np.dot(self.weights, values))

    def standard_error(self, values) -> float:
        """Monte Carlo standard error; zero for deterministic grids."""
        if self.kind != "monte-carlo":
            return 0.0
        values = np.asarray(values, dtype=float)
        return float(values.std(ddof=1) / np.sqrt(values.size))


def angle_grid(n: int) -> SphereQuadrature:
    """Uniform angle grid on S^1 (trapezoid rule, spectrally accurate)."""
    if n < 3:
        raise ValueError("angle grid needs at least 3 nodes")
    alpha = 2.0 * np.pi * np.arange(n) / n
    nodes = np.column_stack([np.cos(alpha), np.sin(alpha)])
    return SphereQuadrature(nodes, np.full(n, 1.0 / n), "angle-grid")


def monte_carlo(d: int, n: int, seed: int) -> SphereQuadrature:
    """Seeded uniform samples on S^{d-1} with equal weights."""
    if d < 2:
        raise ValueError("d >= 2 required")
    rng = np.random.default_rng(seed)
    g = rng.standard_normal((n, d))
    r = np.linalg.norm(g, axis=1)
    while np.any(r == 0.0):
        bad = r == 0.0
        g[bad] = rng.standard_normal((int(bad.sum()), d))
        r = np.linalg.norm(g, axis=1)
    return SphereQuadrature(g / r[:, None], np.full(n, 1.0 / n), "monte-carlo")


def sphere_moment_linear(z, quad: SphereQuadrature) -> float:
    """Quadrature of ∫(z, w) dν(w); exact value 0."""
    return quad.integrate(quad.nodes @ np.asarray(z, dtype=float))


def sphere_moment_quadratic(B, quad: SphereQuadrature) -> float:
    """Quadrature of ∫(Bw, w) dν(w); exact value trace(B)/d."""
    B = np.asarray(B, dtype=float)
    vals = np.einsum("ni,ij,nj->n", quad.nodes, B, quad.nodes)
    return quad.integrate(vals)


def sphere_moment_bilinear(z1, z2, quad: SphereQuadrature) -> float:
    """Quadrature of ∫(z1, w)(z2, w) dν(w); exact value (z1, z2)/d."""
    a = quad.nodes @ np.asarray(z1, dtype=float)
    b = quad.nodes @ np.asarray(z2, dtype=float)
    return quad.integrate(a * b)


# ---------------------------------------------------------------------------
# identity suite


@dataclass
class IdentityCheck:
    name: str
    value: float
    exact: float
    tolerance: float
    passed: bool


def _check(name, samples, exact, quad, tol_grid):
    """Compare a quadrature mean with its exact value.

    Deterministic grids use a fixed tolerance; Monte Carlo rules use three
    standard errors (plus a rounding floor for zero-variance integrands).
    """
    samples = np.asarray(samples, dtype=float)
    value = quad.integrate(samples)
    if quad.kind == "monte-carlo":
        tol = 3.0 * quad.standard_error(samples) + 1e-12
    else:
        tol = tol_grid
    return IdentityCheck(name, float(value), float(exact), float(tol), bool(abs(value - exact) <= tol))


def verify_identities(d: int, quad: SphereQuadrature, seed: int = 0, fault: Optional[str] = None,
                      n_nested: int = 32) -> list:
    """Moment, eigenfunction, Green and gradient-pairing identities on S^{d-1}.

    ``fault="sign-flip"`` negates the Laplace-Beltrami operator (test hook).
    """
    if quad.dim != d:
        raise ValueError("quadrature dimension does not match d")
    rng = np.random.default_rng(seed)
    W = quad.nodes
    sign = -1.0 if fault == "sign-flip" else 1.0

    def lb(f, w):
        return sign * laplace_beltrami(f, w)

    out = []
    z = rng.standard_normal(d)
    out.append(_check("moment_linear", W @ z, 0.0, quad, 1e-8))
    B = rng.standard_normal((d, d))
    out.append(_check("moment_quadratic", np.einsum("ni,ij,nj->n", W, B, W), np.trace(B) / d, quad, 1e-8))
    z2 = rng.standard_normal(d)
    out.append(_check("moment_bilinear", (W @ z) * (W @ z2), z @ z2 / d, quad, 1e-8))

    # Δ_S ω_n = -(d-1) ω_n pointwise
    worst = 0.0
    for n in range(d):
        e = np.zeros(d)
        e[n] = 1.0
        worst = max(worst, float(np.max(np.abs(lb(linear_function(e), W) + (d - 1) * W[:, n]))))
    out.append(IdentityCheck("eigen_linear", worst, 0.0, 1e-10, worst <= 1e-10))

    # Green: ∫ (Δ_S f) g + ∫ grad f · grad g = 0 for polynomials (degree ≤ 2 each)
    f = quadratic_function(rng.standard_normal((d, d)))
    g = polynomial([(1.0, np.eye(d, dtype=int)[0]), (0.5, 2 * np.eye(d, dtype=int)[-1])])
    green = lb(f, W) * g.value(W) + np.sum(spherical_gradient(f, W) * spherical_gradient(g, W), axis=1)
    out.append(_check("green", green, 0.0, quad, 1e-8))

    # ∫ grad φ · grad f = (d-1) ∫ f φ for φ = (z, ω)
    phi = linear_function(z)
    pair = np.sum(spherical_gradient(phi, W) * spherical_gradient(f, W), axis=1) - (d - 1) * f.value(W) * phi.value(W)
    out.append(_check("gradient_pairing", pair, 0.0, quad, 1e-8))

    # closed form against nested S_n fields on a degree-4 polynomial
    p4 = polynomial([(1.0, [2, 2] + [0] * (d - 2)), (-0.7, [1] + [0] * (d - 2) + [3])])
    pts = W[: min(n_nested, W.shape[0])]
    dev = float(np.max(np.abs(lb(p4, pts) - laplace_beltrami_nested(p4, pts))))
    out.append(IdentityCheck("closed_vs_nested", dev, 0.0, 1e-6, dev <= 1e-6))
    return out
