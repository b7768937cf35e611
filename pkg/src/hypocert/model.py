"""Spherical velocity Langevin model on R^d x S^{d-1}.

The backward generator is ``L = S - A`` with

    S f = (σ²/2) Δ_S f
    A f = -w·∇_x f + grad_S Φ · ∇_w f,      Φ(x, w) = ∇V(x)·w / (d-1)

and the equilibrium measure is μ = e^{-V} dx ⊗ ν.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np
from scipy import special

from . import sphere


@dataclass(frozen=True)
class Potential:
    """Confinement potential V on R^dim, normalized so e^{-V} is a density.

    ``value`` already contains ``log_normalizer``.  Evaluators broadcast over
    leading axes: x has shape ``(..., dim)``.
    """

    dim: int
    value: Callable[[np.ndarray], np.ndarray]
    gradient: Callable[[np.ndarray], np.ndarray]
    hessian: Optional[Callable[[np.ndarray], np.ndarray]] = None
    log_normalizer: float = 0.0
    poincare_constant: Optional[float] = None
    hessian_growth_c: Optional[float] = None
    name: str = "custom"
    params: dict = field(default_factory=dict)
    periodic: bool = False

    def laplacian(self, x) -> np.ndarray:
        if self.hessian is None:
            raise ValueError(f"potential {self.name!r} has no hessian evaluator")
        return np.trace(self.hessian(x), axis1=-2, axis2=-1)


def quadratic_potential(a) -> Potential:
    """V(x) = Σ a_i x_i² + Σ ½ log(π/a_i).

    The Poincaré constant is 2·min a_i (Bakry-Émery, exact for Gaussians);
    the Hessian growth constant is |∇²V|_F = 2|a|, attained at x = 0.
    """
    a = np.atleast_1d(np.asarray(a, dtype=float))
    if np.any(a <= 0):
        raise ValueError("quadratic potential needs all a_i > 0 to be normalizable")
    lognorm = float(np.sum(0.5 * np.log(np.pi / a)))
    H = np.diag(2.0 * a)
    return Potential(
        dim=a.size,
        value=lambda x: np.asarray(x) ** 2 @ a + lognorm,
        gradient=lambda x: 2.0 * a * np.asarray(x),
        hessian=lambda x: np.broadcast_to(H, np.shape(x)[:-1] + H.shape).copy(),
        log_normalizer=lognorm,
        poincare_constant=float(2.0 * a.min()),
        hessian_growth_c=float(np.linalg.norm(H)),
        name="quadratic",
        params={"a": a.tolist()},
    )


def torus_potential(amplitude: float, dim: int = 2) -> Potential:
    """V(x) = a Σ (1 - cos x_i) on the torus [0, 2π)^dim, normalized there.

    Used for the periodic discrete testbed.  Its Poincaré constant has no
    closed form and must be computed (see :func:`hypocert.disc.poincare_constant`).
    """
    a = float(amplitude)
    if a < 0:
        raise ValueError("torus amplitude must be nonnegative")
    # ∫_0^{2π} e^{-a(1-cos x)} dx = 2π e^{-a} I_0(a) = 2π ive(0, a)
    lognorm = float(dim * np.log(2.0 * np.pi * special.ive(0, a)))

    def value(x):
        return a * np.sum(1.0 - np.cos(x), axis=-1) + lognorm

    def gradient(x):
        return a * np.sin(x)

    def hessian(x):
        x = np.asarray(x, dtype=float)
        out = np.zeros(x.shape + (dim,))
        idx = np.arange(dim)
        out[..., idx, idx] = a * np.cos(x)
        return out

    return Potential(
        dim=dim,
        value=value,
        gradient=gradient,
        hessian=hessian,
        log_normalizer=lognorm,
        poincare_constant=1.0 if a == 0.0 else None,
        hessian_growth_c=a * np.sqrt(dim),
        name="torus",
        params={"amplitude": a},
        periodic=True,
    )


@dataclass(frozen=True)
class FiberModel:
    d: int
    sigma: float
    potential: Potential

    def __post_init__(self):
        if self.d < 2:
            raise ValueError("velocity sphere needs d >= 2")
        if not self.sigma > 0:
            raise ValueError("sigma must be positive")
        if self.potential.dim != self.d:
            raise ValueError("potential dimension must equal d")


@dataclass(frozen=True)
class PhaseFunction:
    """Test function on R^d x R^d (ambient in the velocity slot).

    ``x_support`` is the radius of a ball containing the x-support, or None
    if the function is not known to be compactly supported.
    """

    value: Callable
    grad_x: Callable
    grad_w: Callable
    hess_w: Optional[Callable] = None
    x_support: Optional[float] = None


def phase_from_velocity(f: sphere.AmbientFunction) -> PhaseFunction:
    """Lift a function of w alone."""

    def zeros_like_x(x, w):
        return np.zeros(np.broadcast_shapes(np.shape(x), np.shape(w)))

    return PhaseFunction(
        value=lambda x, w: f.value(np.broadcast_to(w, np.broadcast_shapes(np.shape(x), np.shape(w)))),
        grad_x=zeros_like_x,
        grad_w=lambda x, w: f.gradient(np.broadcast_to(w, np.broadcast_shapes(np.shape(x), np.shape(w)))),
        hess_w=None
        if f.hessian is None
        else lambda x, w: f.hessian(np.broadcast_to(w, np.broadcast_shapes(np.shape(x), np.shape(w)))),
    )


def phase_from_position(value, gradient, x_support=None) -> PhaseFunction:
    """Lift a function of x alone (``value``/``gradient`` act on x)."""

    def shape(x, w):
        return np.broadcast_shapes(np.shape(x), np.shape(w))

    d_of = lambda x, w: shape(x, w)[-1]  # noqa: E731
    return PhaseFunction(
        value=lambda x, w: value(np.broadcast_to(x, shape(x, w))),
        grad_x=lambda x, w: gradient(np.broadcast_to(x, shape(x, w))),
        grad_w=lambda x, w: np.zeros(shape(x, w)),
        hess_w=lambda x, w: np.zeros(shape(x, w) + (d_of(x, w),)),
        x_support=x_support,
    )


def phase_product(fx: PhaseFunction, fw: PhaseFunction) -> PhaseFunction:
    """Product of a position-only and a velocity-only phase function."""

    def value(x, w):
        return fx.value(x, w) * fw.value(x, w)

    def grad_x(x, w):
        return fx.grad_x(x, w) * fw.value(x, w)[..., None]

    def grad_w(x, w):
        return fx.value(x, w)[..., None] * fw.grad_w(x, w)

    hess_w = None
    if fw.hess_w is not None:

        def hess_w(x, w):
            return fx.value(x, w)[..., None, None] * fw.hess_w(x, w)

    support = fx.x_support if fx.x_support is not None else fw.x_support
    return PhaseFunction(value, grad_x, grad_w, hess_w, support)


def bump(radius: float):
    """Smooth compactly supported bump exp(-1/(1-|x|²/R²)).

    Returns (value, gradient, hessian) callables acting on x of shape (..., d).
    """
    R2 = float(radius) ** 2

    def _parts(x):
        x = np.asarray(x, dtype=float)
        s = np.sum(x * x, axis=-1) / R2
        inside = s < 1.0
        u = np.where(inside, 1.0 - s, 1.0)
        b = np.where(inside, np.exp(-1.0 / u), 0.0)
        return x, inside, u, b

    def value(x):
        return _parts(x)[3]

    def gradient(x):
        x, inside, u, b = _parts(x)
        db = np.where(inside, -b / u**2, 0.0)
        return db[..., None] * 2.0 * x / R2

    def hessian(x):
        x, inside, u, b = _parts(x)
        db = np.where(inside, -b / u**2, 0.0)
        ddb = np.where(inside, b * (1.0 / u**4 - 2.0 / u**3), 0.0)
        d = x.shape[-1]
        outer = x[..., :, None] * x[..., None, :]
        return ddb[..., None, None] * 4.0 * outer / R2**2 + db[..., None, None] * (2.0 / R2) * np.eye(d)

    return value, gradient, hessian


# ---------------------------------------------------------------------------
# operators


def phi(m: FiberModel, x, w) -> np.ndarray:
    """Φ(x, w) = ∇V(x)·w / (d-1)."""
    return np.sum(m.potential.gradient(x) * np.asarray(w), axis=-1) / (m.d - 1)


def apply_A(m: FiberModel, f: PhaseFunction, x, w) -> np.ndarray:
    x = np.asarray(x, dtype=float)
    w = np.asarray(w, dtype=float)
    grad_phi = m.potential.gradient(x) / (m.d - 1)
    transport = np.sum(w * f.grad_x(x, w), axis=-1)
    drift = np.sum(sphere.project_tangent(w, grad_phi) * f.grad_w(x, w), axis=-1)
    return -transport + drift


def apply_S(m: FiberModel, f: PhaseFunction, x, w) -> np.ndarray:
    if f.hess_w is None:
        raise ValueError("apply_S needs the velocity hessian of f")
    x = np.asarray(x, dtype=float)
    w = np.asarray(w, dtype=float)
    # freeze x and treat f(x, .) as an ambient function of w
    slice_ = sphere.AmbientFunction(
        value=lambda v: f.value(x, v),
        gradient=lambda v: f.grad_w(x, v),
        hessian=lambda v: f.hess_w(x, v),
    )
    return 0.5 * m.sigma**2 * sphere.laplace_beltrami(slice_, w)


def apply_L(m: FiberModel, f: PhaseFunction, x, w) -> np.ndarray:
    return apply_S(m, f, x, w) - apply_A(m, f, x, w)


def apply_L_direct(m: FiberModel, f: PhaseFunction, x, w) -> np.ndarray:
    """L = w·∇_x - grad_S Φ·∇_w + (σ²/2) Δ_S, written out term by term."""
    x = np.asarray(x, dtype=float)
    w = np.asarray(w, dtype=float)
    d = m.d
    gx = f.grad_x(x, w)
    gw = f.grad_w(x, w)
    H = f.hess_w(x, w)
    gV = m.potential.gradient(x)
    grad_s_phi = (gV - w * np.sum(w * gV, axis=-1, keepdims=True)) / (d - 1)
    lap = (
        np.trace(H, axis1=-2, axis2=-1)
        - np.einsum("...i,...ij,...j->...", w, H, w)
        - (d - 1) * np.sum(w * gw, axis=-1)
    )
    return np.sum(w * gx, axis=-1) - np.sum(grad_s_phi * gw, axis=-1) + 0.5 * m.sigma**2 * lap


def analytic_constants(m: FiberModel) -> tuple[float, float, float]:
    """(Λ_m, Λ_M, N₁) = (σ²(d-1)/2, Λ/d, (d-1)σ²/4)."""
    lam = m.potential.poincare_constant
    if lam is None:
        raise ValueError(
            f"potential {m.potential.name!r} has no Poincaré constant; "
            "supply one or compute it on a grid"
        )
    s2 = m.sigma**2
    return s2 * (m.d - 1) / 2.0, lam / m.d, (m.d - 1) * s2 / 4.0


def check_C3(pot: Potential, probe) -> float:
    """max over probe points of |∇²V|_F / (1 + |∇V|)."""
    if pot.hessian is None:
        raise ValueError("check_C3 needs a hessian evaluator")
    probe = np.asarray(probe, dtype=float)
    H = pot.hessian(probe)
    g = pot.gradient(probe)
    ratio = np.linalg.norm(H, axis=(-2, -1)) / (1.0 + np.linalg.norm(g, axis=-1))
    return float(np.max(ratio))


def check_A3(pot: Potential, probe, c3: float) -> float:
    """Smallest c₂ with ΔV ≤ c₂ + c₃|∇V|² on the probe set."""
    if not 0.0 <= c3 < 0.5:
        raise ValueError("c3 must lie in [0, 1/2)")
    probe = np.asarray(probe, dtype=float)
    g = pot.gradient(probe)
    return float(np.max(pot.laplacian(probe) - c3 * np.sum(g * g, axis=-1)))


def probe_grid(dim: int, half_width: float, n: int) -> np.ndarray:
    axes = [np.linspace(-half_width, half_width, n)] * dim
    return np.stack(np.meshgrid(*axes, indexing="ij"), axis=-1).reshape(-1, dim)


@dataclass(frozen=True)
class XQuadrature:
    """Tensor trapezoid nodes on [-X, X]^d with μ-masses summing to 1."""

    nodes: np.ndarray
    weights: np.ndarray
    half_width: float


def box_quadrature(pot: Potential, half_width: float, n: int) -> XQuadrature:
    nodes = probe_grid(pot.dim, half_width, n)
    w = np.exp(-pot.value(nodes))
    return XQuadrature(nodes, w / w.sum(), float(half_width))


def integrate_phase(values, xq: XQuadrature, sq: sphere.SphereQuadrature) -> float:
    """∫ F dμ for F sampled on the product grid (x-nodes × w-nodes)."""
    return float(xq.weights @ np.asarray(values) @ sq.weights)


def _product_grid(xq, sq):
    X = xq.nodes[:, None, :]
    W = sq.nodes[None, :, :]
    return X, W


def check_invariance(m: FiberModel, f: PhaseFunction, xq: XQuadrature, sq) -> float:
    """Quadrature value of ∫ Lf dμ (exactly zero in the continuum)."""
    if f.x_support is not None and f.x_support > xq.half_width:
        raise ValueError("test function support exceeds the quadrature domain")
    X, W = _product_grid(xq, sq)
    return integrate_phase(apply_L(m, f, X, W), xq, sq)


def phase_inner(m: FiberModel, op, f: PhaseFunction, g: PhaseFunction, xq, sq) -> float:
    """∫ (op f) g dμ with ``op`` one of apply_A / apply_S / apply_L."""
    X, W = _product_grid(xq, sq)
    return integrate_phase(op(m, f, X, W) * g.value(X, W), xq, sq)
