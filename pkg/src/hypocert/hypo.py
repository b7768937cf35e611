"""Finite-dimensional hypocoercivity engine.

An instance is a weighted space ``(R^n, <f, g> = Σ w_i f_i g_i)`` with
operators ``S`` (symmetric, nonpositive), ``A`` (antisymmetric) and the
projection ``P_S`` onto the "macroscopic" subspace, given by a W-orthonormal
basis ``U`` that contains the constants.  ``P = P_S - <., 1> 1``.

Everything that involves the auxiliary operator

    B = (I + (AP)*(AP))^{-1} (AP)*

is reduced to the coefficient space of ``U`` (an ``m x m`` problem), so large
sparse generators never need a dense ``n x n`` matrix.
"""

from __future__ import annotations

import hashlib
import json
import logging
import math
import warnings
from dataclasses import asdict, dataclass, field
from typing import Optional

import numpy as np
import scipy.linalg as sla
import scipy.sparse as sp
import scipy.sparse.linalg as spla
from scipy import optimize

log = logging.getLogger(__name__)

DENSE_LIMIT = 2000


class InfeasibleRateError(RuntimeError):
    """No positive decay rate could be found for the given constants."""


# ---------------------------------------------------------------------------
# weighted space


@dataclass(frozen=True)
class WeightedSpace:
    weights: np.ndarray

    def __post_init__(self):
        w = np.asarray(self.weights, dtype=float)
        if w.ndim != 1 or np.any(w <= 0):
            raise ValueError("weights must be a positive vector")
        if abs(w.sum() - 1.0) > 1e-12:
            raise ValueError("weights must sum to 1 (probability space)")
        object.__setattr__(self, "weights", w)

    @property
    def dim(self) -> int:
        return self.weights.size

    @property
    def unit(self) -> np.ndarray:
        return np.ones(self.dim)

    def inner(self, f, g):
        """<f, g>; columnwise for 2-d arrays."""
        f = np.asarray(f)
        g = np.asarray(g)
        if f.ndim == 1 and g.ndim == 1:
            return float(np.dot(self.weights * f, g))
        return np.einsum("i,i...,i...->...", self.weights, f, g)

    def norm(self, f):
        return np.sqrt(np.maximum(self.inner(f, f), 0.0))

    def mean(self, f):
        return self.weights @ np.asarray(f)


def _is_sparse(M) -> bool:
    return sp.issparse(M)


def weighted_adjoint(M, space: WeightedSpace):
    """Adjoint in the weighted inner product: W^{-1} M^T W."""
    w = space.weights
    if _is_sparse(M):
        return (sp.diags(1.0 / w) @ M.T @ sp.diags(w)).tocsr()
    M = np.asarray(M)
    return (M.T * w[None, :]) / w[:, None]


def _symmetrize(M, space):
    """W^{1/2} M W^{-1/2}: weighted norms become Euclidean ones."""
    r = np.sqrt(space.weights)
    if _is_sparse(M):
        return (sp.diags(r) @ M @ sp.diags(1.0 / r)).tocsr()
    return np.asarray(M) * r[:, None] / r[None, :]


def _spectral_norm(M) -> float:
    if _is_sparse(M):
        M = M.tocsr()
        M.eliminate_zeros()
        if M.nnz == 0:
            return 0.0
        amax = np.abs(M.data).max()
        if amax == 0.0:
            return 0.0
        if min(M.shape) <= DENSE_LIMIT:
            return float(np.linalg.norm(M.toarray(), 2))
        try:
            s = spla.svds(M / amax, k=1, return_singular_vectors=False, tol=1e-6)
            return float(s[0] * amax)
        except Exception:  # ARPACK trouble: fall back to sqrt(|M|_1 |M|_inf)
            return float(np.sqrt(spla.norm(M, 1) * spla.norm(M, np.inf)))
    M = np.asarray(M)
    if M.size == 0:
        return 0.0
    return float(np.linalg.norm(M, 2))


def weighted_norm(M, space: WeightedSpace) -> float:
    """Operator norm of M in L²(w)."""
    return _spectral_norm(_symmetrize(M, space))


def _max_sym_eig(M, space) -> float:
    """Largest eigenvalue of the weighted-symmetric part of M.

    Exact for dense matrices; a Gershgorin upper bound for large sparse ones.
    """
    Ms = _symmetrize(M, space)
    Ms = 0.5 * (Ms + Ms.T)
    if _is_sparse(Ms):
        if Ms.shape[0] <= DENSE_LIMIT:
            return float(np.linalg.eigvalsh(Ms.toarray())[-1])
        Ms = Ms.tocsr()
        diag = Ms.diagonal()
        radius = np.asarray(abs(Ms).sum(axis=1)).ravel() - np.abs(diag)
        return float(np.max(diag + radius))
    return float(np.linalg.eigvalsh(Ms)[-1])


# ---------------------------------------------------------------------------
# operator set


def _orthonormal_basis_of_projection(P, space: WeightedSpace, tol=1e-8):
    Ps = _symmetrize(np.asarray(P), space)
    Ps = 0.5 * (Ps + Ps.T)
    vals, vecs = np.linalg.eigh(Ps)
    Q = vecs[:, vals > 0.5]
    return Q / np.sqrt(space.weights)[:, None]


@dataclass(frozen=True)
class OperatorSet:
    """Matrices S, A and the macroscopic projection of one instance.

    ``basis`` holds a W-orthonormal basis of range(P_S) and must span the
    constant vector.  ``P_input`` keeps the projection matrix when the
    instance was built from one, so that its own structure can be audited.
    """

    space: WeightedSpace
    S: object
    A: object
    basis: object
    P_input: Optional[np.ndarray] = None
    label: str = ""

    @classmethod
    def from_projection(cls, space, S, A, P, label=""):
        """Build from an explicit projection P (range orthogonal to 1)."""
        P = np.asarray(P, dtype=float)
        PS = P + np.outer(space.unit, space.weights)
        U = _orthonormal_basis_of_projection(PS, space)
        return cls(space, S, A, U, P_input=P, label=label)

    @property
    def dim(self) -> int:
        return self.space.dim

    @property
    def rank(self) -> int:
        return self.basis.shape[1]

    @property
    def sparse(self) -> bool:
        return _is_sparse(self.S) or _is_sparse(self.A)

    @property
    def L(self):
        return self.S - self.A

    # coefficient-space quantities -----------------------------------------

    def coeffs(self, f):
        """U^T W f: coordinates of P_S f in the basis."""
        f = np.asarray(f)
        wf = self.space.weights[:, None] * f if f.ndim == 2 else self.space.weights * f
        return np.asarray(self.basis.T @ wf)

    def unit_coeffs(self) -> np.ndarray:
        """Coordinates of the constant vector; a unit vector in R^m."""
        return np.asarray(self.coeffs(self.space.unit)).ravel()

    def coeff_projector(self) -> np.ndarray:
        """Π = I - e e^T, the projection onto mean-zero coefficients."""
        e = self.unit_coeffs()
        return np.eye(self.rank) - np.outer(e, e)

    def apply_PS(self, f):
        return np.asarray(self.basis @ self.coeffs(f))

    def apply_P(self, f):
        f = np.asarray(f)
        return self.apply_PS(f) - self.space.mean(f)

    def P_matrix(self) -> np.ndarray:
        if self.dim > DENSE_LIMIT * 4:
            raise MemoryError("P is only materialized for small instances")
        U = self.basis.toarray() if _is_sparse(self.basis) else np.asarray(self.basis)
        PS = U @ (U.T * self.space.weights[None, :])
        return PS - np.outer(self.space.unit, self.space.weights)

    def PS_matrix(self) -> np.ndarray:
        return self.P_matrix() + np.outer(self.space.unit, self.space.weights)

    def dense(self, M) -> np.ndarray:
        return M.toarray() if _is_sparse(M) else np.asarray(M)

    def fingerprint(self) -> str:
        h = hashlib.sha256()
        for M in (self.S, self.A, self.basis):
            if _is_sparse(M):
                M = M.tocsr()
                h.update(np.asarray(M.indptr).tobytes())
                h.update(np.asarray(M.indices).tobytes())
                h.update(np.round(M.data, 12).tobytes())
            else:
                h.update(np.round(np.asarray(M), 12).tobytes())
        h.update(np.round(self.space.weights, 15).tobytes())
        return h.hexdigest()[:16]


# ---------------------------------------------------------------------------
# structure checks


DEFAULT_TOL = {
    "S_symmetry": 1e-10,
    "S_nonpositive": 1e-10,
    "A_antisymmetry": 1e-10,
    "P_symmetry": 1e-10,
    "P_idempotent": 1e-10,
    "basis_orthonormal": 1e-10,
    "unit_in_PS": 1e-10,
    "SP_zero": 1e-10,
    "invariance": 1e-10,
    "conservativity": 1e-10,
    "PAP_zero": 1e-10,
    "L_dissipative": 1e-10,
}


@dataclass
class StructureReport:
    violations: dict
    tolerances: dict

    @property
    def passed(self) -> dict:
        return {k: bool(v <= self.tolerances.get(k, 1e-10)) for k, v in self.violations.items()}

    @property
    def ok(self) -> bool:
        return all(self.passed.values())

    def failures(self) -> list:
        return [k for k, good in self.passed.items() if not good]

    def lines(self) -> list:
        out = []
        for k, v in self.violations.items():
            flag = "ok  " if self.passed[k] else "FAIL"
            out.append(f"{flag} {k:<18} {v:.3e} (tol {self.tolerances.get(k, 1e-10):.0e})")
        return out


def check_structure(ops: OperatorSet, tol: Optional[dict] = None) -> StructureReport:
    """Measure every structural requirement on the instance (report only)."""
    tol = {**DEFAULT_TOL, **(tol or {})}
    space = ops.space
    w = space.weights
    one = space.unit
    U = ops.basis
    v = {}

    v["S_symmetry"] = weighted_norm(ops.S - weighted_adjoint(ops.S, space), space)
    v["S_nonpositive"] = max(0.0, _max_sym_eig(ops.S, space))
    v["A_antisymmetry"] = weighted_norm(ops.A + weighted_adjoint(ops.A, space), space)

    if ops.P_input is not None:
        P = ops.P_input
        v["P_symmetry"] = weighted_norm(P - weighted_adjoint(P, space), space)
        v["P_idempotent"] = weighted_norm(P @ P - P, space)
    gram = _as_dense(U.T @ sp.diags(w) @ U) if _is_sparse(U) else U.T @ (w[:, None] * U)
    v["basis_orthonormal"] = float(np.linalg.norm(gram - np.eye(ops.rank), 2))
    v["unit_in_PS"] = float(space.norm(one - ops.apply_PS(one)))

    # |S P_S|_W = |W^{1/2} S U|_2 for W-orthonormal U
    SU = ops.S @ U
    if _is_sparse(SU):
        v["SP_zero"] = _spectral_norm(sp.diags(np.sqrt(w)) @ sp.csr_matrix(SU))
    else:
        v["SP_zero"] = _spectral_norm(np.sqrt(w)[:, None] * np.asarray(SU))

    L = ops.L
    Lt_w = np.asarray(L.T @ w).ravel()
    # sup_f <Lf, 1>/|f| = |W^{-1} L^T w|_W
    v["invariance"] = float(space.norm(Lt_w / w))
    v["conservativity"] = float(space.norm(np.asarray(L @ one).ravel()))

    Pi = ops.coeff_projector()
    UtWAU = U.T @ (sp.diags(w) @ (ops.A @ U)) if ops.sparse or _is_sparse(U) else U.T @ (w[:, None] * (ops.A @ U))
    PAP = Pi @ _as_dense(UtWAU) @ Pi
    v["PAP_zero"] = _spectral_norm(PAP)
    v["L_dissipative"] = max(0.0, _max_sym_eig(L, space))
    return StructureReport(v, tol)


# ---------------------------------------------------------------------------
# the auxiliary operator B


class AuxiliaryOperator:
    """B = (I + T*T)^{-1} T* with T = AP.

    ``dense`` instances carry the full matrix from a direct solve.  Reduced
    instances keep ``B = U Π F^{-1} Y`` with ``F = I + Π K Π`` (m x m, it
    commutes with Π) and ``Y = U^T A^T W`` (m x n, sparse when A is).
    """

    def __init__(self, ops: OperatorSet, matrix=None, factor=None, Y=None, F=None, Pi=None):
        self.ops = ops
        self.matrix = matrix
        self.factor = factor
        self.Y = Y
        self.F = F
        self.Pi = Pi

    @property
    def is_dense(self) -> bool:
        return self.matrix is not None

    def coeff_solve(self, C):
        """Π F^{-1} C for a coefficient-space array C."""
        return self.Pi @ sla.cho_solve(self.factor, C)

    def apply(self, f):
        f = np.asarray(f, dtype=float)
        if self.matrix is not None:
            return self.matrix @ f
        return np.asarray(self.ops.basis @ self.coeff_solve(self.Y @ f))

    __matmul__ = apply

    def to_dense(self) -> np.ndarray:
        if self.matrix is not None:
            return self.matrix
        U = self.ops.dense(self.ops.basis)
        return U @ self.coeff_solve(_as_dense(self.Y))


def _reduced_pieces(ops: OperatorSet):
    w = ops.space.weights
    U = ops.basis
    Pi = ops.coeff_projector()
    AU = ops.A @ U
    if _is_sparse(AU):
        AU = AU.tocsc()
        K = (AU.T @ sp.diags(w) @ AU).toarray()
        Y = (AU.T @ sp.diags(w)).tocsr()
    else:
        AU = np.asarray(AU)
        K = AU.T @ (w[:, None] * AU)
        Y = AU.T * w[None, :]
    K = 0.5 * (K + K.T)
    F = np.eye(ops.rank) + Pi @ K @ Pi
    return K, F, Y, Pi


def build_B(ops: OperatorSet, method: str = "auto") -> AuxiliaryOperator:
    """Construct B for the instance.

    ``method="dense"`` solves ``(I + T*T) B = T*`` directly with the full
    projection matrix; ``"reduced"`` works in the coefficient space of the
    basis.  ``"auto"`` picks dense for small dense instances.
    """
    if method == "auto":
        method = "dense" if (not ops.sparse and ops.dim <= 400) else "reduced"
    if method == "dense":
        P = ops.P_input if ops.P_input is not None else ops.P_matrix()
        A = ops.dense(ops.A)
        T = A @ P
        Ts = weighted_adjoint(T, ops.space)
        M = np.eye(ops.dim) + Ts @ T
        cond = np.linalg.cond(M)
        if not np.isfinite(cond) or cond > 1e14:
            raise np.linalg.LinAlgError(f"I + T*T is singular (cond={cond:.2e})")
        return AuxiliaryOperator(ops, matrix=np.linalg.solve(M, Ts))
    if method != "reduced":
        raise ValueError(f"unknown method {method!r}")
    K, F, Y, Pi = _reduced_pieces(ops)
    return AuxiliaryOperator(ops, factor=sla.cho_factor(F), Y=Y, F=F, Pi=Pi)


# ---------------------------------------------------------------------------
# constants


@dataclass
class MeasuredConstants:
    lambda_m: float
    lambda_M: float
    n1: float
    n2: float
    n1_variants: dict = field(default_factory=dict)
    n2_variants: dict = field(default_factory=dict)
    kernel_violations: dict = field(default_factory=dict)
    notes: list = field(default_factory=list)


def _complement(Q: np.ndarray) -> np.ndarray:
    return sla.null_space(Q.T) if Q.shape[1] else np.eye(Q.shape[0])


def _lambda_m(ops: OperatorSet) -> float:
    space = ops.space
    r = np.sqrt(space.weights)
    Sh = _symmetrize(ops.S, space)
    Sh = 0.5 * (Sh + Sh.T)
    if ops.dim <= DENSE_LIMIT:
        Sh = Sh.toarray() if _is_sparse(Sh) else Sh
        Q = r[:, None] * ops.dense(ops.basis)
        C = _complement(Q)
        if C.shape[1] == 0:
            return math.nan
        return float(np.linalg.eigvalsh(C.T @ (-Sh) @ C)[0])
    # large sparse: -Ŝ is PSD with range(Q) in its kernel; lift that kernel by c
    Q = sp.diags(r) @ ops.basis
    Q = sp.csr_matrix(Q) if _is_sparse(Q) else np.asarray(Q)
    negS = -Sh.tocsr()
    c = float(np.max(np.asarray(abs(negS).sum(axis=1)).ravel())) + 1.0

    def mv(x):
        x = np.asarray(x).ravel()
        return negS @ x + c * (Q @ (Q.T @ x))

    op = spla.LinearOperator(negS.shape, matvec=mv, dtype=float)
    rng = np.random.default_rng(0)
    vals = spla.eigsh(op, k=1, which="SA", tol=1e-12, v0=rng.standard_normal(ops.dim),
                      maxiter=20000, return_eigenvectors=False)
    # Lanczos can stall on hugely degenerate spectra (e.g. S = 0); both
    # results are Rayleigh quotients, so the smaller one is the better bound
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        lob = spla.lobpcg(op, rng.standard_normal((ops.dim, 4)), largest=False, tol=1e-10,
                          maxiter=2000)[0]
    return float(min(vals[0], np.min(lob)))


def _lambda_M(ops: OperatorSet, K=None) -> float:
    if K is None:
        K, _, _, _ = _reduced_pieces(ops)
    e = ops.unit_coeffs()
    C = _complement(e[:, None])
    if C.shape[1] == 0:
        return math.nan
    return float(np.linalg.eigvalsh(C.T @ K @ C)[0])


def _gram_norm(Finv_left, Y, ops, C):
    """|Π F^{-1} Y (I - Q)|_{W -> coeff}, Q = U C U^T W, via an m x m Gram matrix."""
    w = ops.space.weights
    U = ops.basis
    if _is_sparse(Y):
        G1 = (Y @ sp.diags(1.0 / w) @ Y.T).toarray()
        YU = Y @ U
        YU = YU.toarray() if _is_sparse(YU) else np.asarray(YU)
    else:
        G1 = (Y / w[None, :]) @ Y.T
        YU = Y @ ops.dense(U)
    G = G1 - YU @ C @ YU.T
    G = Finv_left(Finv_left(G).T)  # Π F^{-1} G F^{-1} Π
    G = 0.5 * (G + G.T)
    return float(np.sqrt(max(np.linalg.eigvalsh(G)[-1], 0.0)))


def measure_constants(ops: OperatorSet, B: AuxiliaryOperator) -> MeasuredConstants:
    """Measure Λ_m, Λ_M, N₁, N₂ on the instance.

    N₁ = sup |BSf| / |(I-P₁)f|, N₂ = sup |BA(I-P)f| / |(I-P₂)f| for both
    choices P_n ∈ {P, P_S}; the reported pair is the smallest finite one.
    """
    notes = []
    lam_m = _lambda_m(ops)
    if math.isnan(lam_m):
        notes.append("lambda_m not applicable: range(I-P_S) is trivial")
    K, F, _, Pi = _reduced_pieces(ops)
    lam_M = _lambda_M(ops, K)
    if math.isnan(lam_M):
        notes.append("lambda_M not applicable: range(P) is trivial")

    m = ops.rank
    C_S = np.eye(m)
    C_P = Pi
    kernel = {}
    if B.is_dense:
        space = ops.space
        Bm = B.matrix
        P = ops.P_input if ops.P_input is not None else ops.P_matrix()
        PS = P + np.outer(space.unit, space.weights)
        I = np.eye(ops.dim)
        BS = Bm @ ops.dense(ops.S)
        BAQ = Bm @ ops.dense(ops.A) @ (I - P)
        n1 = {"PS": weighted_norm(BS @ (I - PS), space), "P": weighted_norm(BS @ (I - P), space)}
        n2 = {"P": weighted_norm(BAQ @ (I - P), space), "PS": weighted_norm(BAQ @ (I - PS), space)}
        kernel = {
            "BS_on_PS": weighted_norm(BS @ PS, space),
            "BS_on_P": weighted_norm(BS @ P, space),
            "BA(I-P)_on_PS": weighted_norm(BAQ @ PS, space),
            "BA(I-P)_on_P": weighted_norm(BAQ @ P, space),
        }
    else:
        finv = B.coeff_solve
        Y1 = B.Y @ ops.S
        Z = B.Y @ ops.A
        # B A (I-P)(I-P_n) = B A (I-P_n) for P_n in {P, P_S}
        n1 = {"PS": _gram_norm(finv, Y1, ops, C_S), "P": _gram_norm(finv, Y1, ops, C_P)}
        n2 = {"P": _gram_norm(finv, Z, ops, C_P), "PS": _gram_norm(finv, Z, ops, C_S)}
        Y1U = _as_dense(Y1 @ ops.basis)
        ZU = _as_dense(Z @ ops.basis)
        e = ops.unit_coeffs()
        kernel = {
            "BS_on_PS": _spectral_norm(finv(Y1U)),
            "BS_on_P": _spectral_norm(finv(Y1U) @ Pi),
            # B A (I-P) P_S = B A 1 <., 1>
            "BA(I-P)_on_PS": float(np.linalg.norm(finv(ZU @ e))),
            "BA(I-P)_on_P": 0.0,
        }

    tolk = 1e-8
    finite1 = {k: v for k, v in n1.items() if kernel.get(f"BS_on_{k}", 0.0) <= tolk * max(1.0, v)}
    finite2 = {k: v for k, v in n2.items() if kernel.get(f"BA(I-P)_on_{k}", 0.0) <= tolk * max(1.0, v)}
    if not finite1:
        notes.append("BS does not vanish on range(P_1): N1 unbounded")
        finite1 = {"PS": math.inf}
    if not finite2:
        notes.append("BA(I-P) does not vanish on range(P_2): N2 unbounded")
        finite2 = {"P": math.inf}
    return MeasuredConstants(
        lambda_m=lam_m,
        lambda_M=lam_M,
        n1=min(finite1.values()),
        n2=min(finite2.values()),
        n1_variants=n1,
        n2_variants=n2,
        kernel_violations=kernel,
        notes=notes,
    )


def macroscopic_matrix(ops: OperatorSet) -> np.ndarray:
    """Coefficient-space matrix of -P A² P restricted to range(P_S).

    Equals Π K Π with K = (AU)^* (AU); acting on x-functions this is the
    discrete counterpart of -(1/d)(Δ - ∇V·∇).
    """
    K, _, _, Pi = _reduced_pieces(ops)
    return Pi @ K @ Pi


def fit_M1(ops: OperatorSet) -> tuple[float, float]:
    """Least-squares M₁ in P A S ≈ M₁ P A, plus the relative residual."""
    w = ops.space.weights
    U = ops.basis
    Pi = ops.coeff_projector()
    Ut = U.T @ sp.diags(w) if _is_sparse(U) else U.T * w[None, :]
    PA = Pi @ _as_dense(Ut @ ops.A)
    PAS = Pi @ _as_dense(Ut @ ops.A @ ops.S)
    denom = float(np.sum(PA * PA))
    if denom == 0.0:
        return 0.0, 0.0
    m1 = float(np.sum(PAS * PA) / denom)
    res = float(np.linalg.norm(PAS - m1 * PA) / np.sqrt(denom))
    return m1, res


def _as_dense(M):
    return M.toarray() if _is_sparse(M) else np.asarray(M)


# ---------------------------------------------------------------------------
# entropy and dissipation


def entropy(B: AuxiliaryOperator, eps: float, f, space: WeightedSpace) -> float:
    """H_ε[f] = ½|f|² + ε <Bf, f>."""
    if not 0.0 <= eps < 1.0:
        raise ValueError("eps must lie in [0, 1)")
    return 0.5 * space.inner(f, f) + eps * space.inner(B.apply(f), f)


def dissipation_terms(ops: OperatorSet, B: AuxiliaryOperator, f) -> tuple[float, float, float]:
    """(I₁, I₂, I₃) = (-<Lf,f>, <BLf,f>, <Bf,Lf>)."""
    space = ops.space
    Lf = np.asarray(ops.L @ f).ravel()
    return (
        -space.inner(Lf, f),
        space.inner(B.apply(Lf), f),
        space.inner(B.apply(f), Lf),
    )


# ---------------------------------------------------------------------------
# rate optimization


@dataclass
class RateResult:
    delta: float
    eps: float
    kappa: float
    kappa1: float
    kappa2: float


def rate_coefficients(delta, eps, lambda_m, lambda_M, n1, n2):
    """Coefficients of |(I-P)f|² and |Pf|² in the dissipation lower bound."""
    n3 = n1 + n2
    c_perp = lambda_m - eps * (1.0 + n3) * (1.0 + delta**2) / (2.0 * delta)
    c_par = eps * (lambda_M / (1.0 + lambda_M) - (1.0 + n3) * delta / 2.0)
    return c_perp, c_par


EPS_CLAMP = 1e-9


def _best_eps(delta, lambda_m, lambda_M, n1, n2):
    """Optimal ε for fixed δ: the crossing c_perp = c_par, clamped below 1."""
    n3 = n1 + n2
    a = lambda_M / (1.0 + lambda_M) - (1.0 + n3) * delta / 2.0
    if a <= 0:
        return None
    b = (1.0 + n3) * (1.0 + delta**2) / (2.0 * delta)
    eps = lambda_m / (a + b)
    # below the crossing κ₂ = εa/(1+ε) increases in ε, above it decreases
    return min(eps, 1.0 - EPS_CLAMP)


def _kappa2(delta, lambda_m, lambda_M, n1, n2):
    eps = _best_eps(delta, lambda_m, lambda_M, n1, n2)
    if eps is None:
        return -np.inf, None
    cp, cq = rate_coefficients(delta, eps, lambda_m, lambda_M, n1, n2)
    return min(cp, cq) / (1.0 + eps), eps


def optimize_rate(lambda_m: float, lambda_M: float, n1: float, n2: float) -> RateResult:
    """Maximize κ₂ = min(c_perp, c_par)/(1+ε) over δ > 0 and ε ∈ (0, 1).

    The inner maximization over ε is solved in closed form; the outer one
    over δ runs a log-grid followed by bounded Brent refinement.
    """
    vals = (lambda_m, lambda_M, n1, n2)
    if not all(np.isfinite(v) for v in vals) or min(lambda_m, lambda_M) <= 0 or min(n1, n2) < 0:
        raise InfeasibleRateError(f"constants must be positive and finite, got {vals}")
    n3 = n1 + n2
    dmax = 2.0 * lambda_M / ((1.0 + lambda_M) * (1.0 + n3))
    grid = dmax * np.logspace(-8, 0, 400, endpoint=False)
    scores = np.array([_kappa2(d, *vals)[0] for d in grid])
    i = int(np.argmax(scores))
    lo = grid[max(i - 1, 0)] if i > 0 else grid[0] * 0.5
    hi = grid[min(i + 1, grid.size - 1)] if i < grid.size - 1 else dmax
    res = optimize.minimize_scalar(
        lambda d: -_kappa2(d, *vals)[0], bounds=(lo, hi), method="bounded",
        options={"xatol": 1e-14 * dmax, "maxiter": 500},
    )
    delta = float(res.x) if -res.fun >= scores[i] else float(grid[i])
    k2, eps = _kappa2(delta, *vals)
    if eps is None or not k2 > 0:
        raise InfeasibleRateError("rate search failed to find a positive κ₂")
    cp, cq = rate_coefficients(delta, eps, *vals)
    kappa = min(cp, cq)
    return RateResult(
        delta=delta,
        eps=float(eps),
        kappa=float(kappa),
        kappa1=float(np.sqrt((1.0 + eps) / (1.0 - eps))),
        kappa2=float(kappa / (1.0 + eps)),
    )


def brute_force_rate(lambda_m, lambda_M, n1, n2, n=2000, rounds=8):
    """Grid search over (δ, ε) on log-spaced grids with repeated zooming.

    Independent of the closed-form inner solve; used as a test oracle.
    Returns ``(kappa2, delta, eps)``.
    """
    n3 = n1 + n2
    dmax = 2.0 * lambda_M / ((1.0 + lambda_M) * (1.0 + n3))
    ld = (np.log(dmax) - 30.0, np.log(dmax))
    le = (-30.0, 0.0)
    best = (-np.inf, None, None)
    size = n
    for _ in range(rounds):
        D = np.exp(np.linspace(*ld, size))
        E = np.exp(np.linspace(*le, size))
        D = D[D < dmax]
        E = E[E < 1.0]
        DD, EE = np.meshgrid(D, E, indexing="ij")
        cp, cq = rate_coefficients(DD, EE, lambda_m, lambda_M, n1, n2)
        k2 = np.minimum(cp, cq) / (1.0 + EE)
        j = np.unravel_index(np.argmax(k2), k2.shape)
        if k2[j] > best[0]:
            best = (float(k2[j]), float(DD[j]), float(EE[j]))
        wd = (ld[1] - ld[0]) / 8.0
        we = (le[1] - le[0]) / 8.0
        cd, ce = np.log(best[1]), np.log(best[2])
        ld = (cd - wd, min(cd + wd, np.log(dmax)))
        le = (ce - we, min(ce + we, 0.0))
        size = 400
    return best


# ---------------------------------------------------------------------------
# certificate


N2_SOURCES = ("operator-norm", "elliptic", "supplied")


def compare_n2(operator_norm: float, elliptic: float, factor: float = 2.0) -> Optional[str]:
    """Warning text when the two N₂ surrogates differ by more than ``factor``."""
    lo, hi = sorted((float(operator_norm), float(elliptic)))
    if lo > 0 and hi / lo <= factor:
        return None
    msg = f"N2 surrogates disagree beyond a factor {factor}: operator-norm {operator_norm:.4g}, elliptic {elliptic:.4g}"
    warnings.warn(msg, RuntimeWarning, stacklevel=2)
    return msg


@dataclass
class HypoCertificate:
    lambda_m: float
    lambda_M: float
    n1: float
    n2: float
    delta_star: float
    eps_star: float
    kappa: float
    kappa1: float
    kappa2: float
    provenance: dict = field(default_factory=dict)
    tolerances: dict = field(default_factory=dict)
    instance_hash: str = ""
    seed: Optional[int] = None
    notes: list = field(default_factory=list)
    n2_source: str = "operator-norm"

    def __post_init__(self):
        if self.n2_source not in N2_SOURCES:
            raise ValueError(f"n2_source must be one of {N2_SOURCES}")
        if not 0.0 < self.eps_star < 1.0:
            raise ValueError("eps_star must lie in (0, 1)")
        k1 = math.sqrt((1.0 + self.eps_star) / (1.0 - self.eps_star))
        if abs(k1 - self.kappa1) > 1e-12 * k1:
            raise ValueError("kappa1 inconsistent with eps_star")
        if abs(self.kappa / (1.0 + self.eps_star) - self.kappa2) > 1e-12 * max(self.kappa2, 1e-300):
            raise ValueError("kappa2 inconsistent with kappa and eps_star")

    @classmethod
    def from_constants(cls, lambda_m, lambda_M, n1, n2, provenance=None, **kw):
        r = optimize_rate(lambda_m, lambda_M, n1, n2)
        return cls(
            lambda_m=float(lambda_m), lambda_M=float(lambda_M), n1=float(n1), n2=float(n2),
            delta_star=r.delta, eps_star=r.eps, kappa=r.kappa, kappa1=r.kappa1, kappa2=r.kappa2,
            provenance=dict(provenance or {}), **kw,
        )

    def bound(self, t):
        return self.kappa1 * np.exp(-self.kappa2 * np.asarray(t, dtype=float))

    def to_dict(self) -> dict:
        return asdict(self)

    def to_json(self, **kw) -> str:
        return json.dumps(self.to_dict(), sort_keys=True, **kw)


def certify_instance(ops: OperatorSet, method="auto", seed=None, tol=None):
    """Structure check, B, measured constants and optimized rate in one go."""
    report = check_structure(ops, tol)
    if not report.ok:
        return report, None, None, None
    B = build_B(ops, method)
    mc = measure_constants(ops, B)
    cert = HypoCertificate.from_constants(
        mc.lambda_m, mc.lambda_M, mc.n1, mc.n2,
        provenance={k: "measured" for k in ("lambda_m", "lambda_M", "n1", "n2")},
        tolerances=report.tolerances, instance_hash=ops.fingerprint(), seed=seed,
        notes=list(mc.notes),
    )
    return report, B, mc, cert


# ---------------------------------------------------------------------------
# decay certification


@dataclass
class DecayReport:
    times: np.ndarray
    ratios: np.ndarray
    max_ratio: float
    passed: bool
    slack: float


def propagate(ops: OperatorSet, f0, times) -> np.ndarray:
    """f(t) = e^{tL} f0 for each t in ``times`` (sorted, ≥ 0).

    Returns an array of shape ``(len(times),) + f0.shape``.
    """
    times = np.asarray(times, dtype=float)
    if np.any(np.diff(times) < 0) or np.any(times < 0):
        raise ValueError("times must be sorted and nonnegative")
    f = np.asarray(f0, dtype=float)
    out = np.empty((times.size,) + f.shape)
    L = ops.L
    t_prev = 0.0
    if not _is_sparse(L) and ops.dim <= DENSE_LIMIT:
        for k, t in enumerate(times):
            out[k] = sla.expm(t * L) @ f0
        return out
    L = sp.csr_matrix(L)
    for k, t in enumerate(times):
        dt = t - t_prev
        if dt > 0:
            f = spla.expm_multiply(dt * L, f)
        out[k] = f
        t_prev = t
    return out


def certify_decay(ops: OperatorSet, cert: HypoCertificate, g, times, slack=1e-8,
                  allow_analytic=False) -> DecayReport:
    """Check |e^{tL}(g - <g,1>)| ≤ κ₁ e^{-κ₂ t} |g - <g,1>| for each t.

    ``g`` may hold several initial vectors as columns.
    """
    if not allow_analytic:
        bad = [k for k in ("lambda_m", "lambda_M", "n1", "n2") if cert.provenance.get(k) != "measured"]
        if bad:
            raise ValueError(f"certificate constants not measured on this instance: {bad}")
    space = ops.space
    g = np.asarray(g, dtype=float)
    f0 = g - space.mean(g)
    times = np.asarray(times, dtype=float)
    ft = propagate(ops, f0, times)
    n0 = np.atleast_1d(space.norm(f0))
    ratios = np.zeros((times.size, n0.size))
    for k, t in enumerate(times):
        nt = np.atleast_1d(space.norm(ft[k]))
        env = cert.bound(t) * n0
        with np.errstate(invalid="ignore", divide="ignore"):
            r = np.where(n0 > 0, nt / env, 0.0)
        ratios[k] = r
    mx = float(ratios.max()) if ratios.size else 0.0
    return DecayReport(times, ratios, mx, bool(mx <= 1.0 + slack), slack)


# ---------------------------------------------------------------------------
# admissible random instances


def random_admissible_instance(dim: int, rank: int, rng: np.random.Generator,
                               weights: Optional[np.ndarray] = None) -> OperatorSet:
    """Random instance satisfying all structural requirements exactly.

    A = A0 - P A0 P with A0 weighted-antisymmetric and A0 1 = 0;
    S = (I - P_S) S0 (I - P_S) with S0 weighted-symmetric, nonpositive.
    """
    if not 1 <= rank <= dim - 2:
        raise ValueError("need 1 <= rank <= dim - 2")
    if weights is None:
        weights = rng.uniform(0.5, 1.5, dim)
    w = np.asarray(weights, dtype=float)
    w = w / w.sum()
    space = WeightedSpace(w)
    r = np.sqrt(w)
    one = np.ones(dim)

    # W-orthonormal frame [1, V]; V spans range(P)
    G = np.column_stack([one, rng.standard_normal((dim, rank))])
    Q, _ = np.linalg.qr(r[:, None] * G)
    U = Q / r[:, None]
    U[:, 0] = one  # QR returns ±1 here; pin the sign
    V = U[:, 1:]
    P = V @ (V.T * w[None, :])
    PS = P + np.outer(one, w)

    R = rng.standard_normal((dim, dim))
    K = R - R.T
    E = np.eye(dim) - np.outer(one, one) / dim
    K = E @ K @ E
    A0 = K / w[:, None]
    A = A0 - P @ A0 @ P
    A /= np.linalg.norm(_symmetrize(A, space), 2)

    Gm = rng.standard_normal((dim, dim))
    S0 = -(Gm.T @ Gm) / w[:, None]
    IQ = np.eye(dim) - PS
    S = IQ @ S0 @ IQ
    S /= np.linalg.norm(_symmetrize(S, space), 2)
    return OperatorSet.from_projection(space, S, A, P, label=f"random-{dim}-{rank}")
