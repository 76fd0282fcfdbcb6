"""Symmetric eigensolvers for the Steklov pencil and for Dirichlet limit problems.

Both problems are reduced to the pencil ``B v = mu A v`` with ``A`` symmetric
positive definite.  The operator ``A^{-1} B`` is self-adjoint in the
``A``-inner product, so a block Krylov (Lanczos) iteration with full
reorthogonalisation in that inner product delivers both ends of its spectrum.
Steklov eigenvalues are ``lambda = sigma + 1/mu`` for the shifted pencil
``A - sigma B``; every shift used is certified SPD by a symmetric LU
factorisation whose pivots give the Sylvester inertia.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Optional

import numpy as np
import scipy.linalg as sla
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from .fem import SolverError, solve_spd

log = logging.getLogger(__name__)


PIVOT_RTOL = 1e-12
ZERO_LAMBDA = 1e-8


class NotPositiveDefinite(SolverError):
    pass


class MissingEigenvalues(SolverError):
    """The discrete pencil has fewer eigenvalues of the requested sign."""


@dataclass
class EigenPair:
    eigenvalue: float
    vector: np.ndarray
    residual_norm: float
    normalization_tag: str = "custom"


@dataclass
class SpectrumSlice:
    positives: list = field(default_factory=list)  # ascending lambda > 0
    negatives: list = field(default_factory=list)  # descending lambda < 0
    shifts: dict = field(default_factory=dict)

    def values(self, sign: str) -> np.ndarray:
        pairs = self.positives if sign == "+" else self.negatives
        return np.array([p.eigenvalue for p in pairs])


# ------------------------------------------------------------ factorisation


def symmetric_lu(A: sp.spmatrix):
    """Symmetric-mode SuperLU (diagonal pivots only); None if SuperLU pivoted off-diagonal."""
    A = sp.csc_matrix(A)
    try:
        lu = spla.splu(
            A, permc_spec="COLAMD", diag_pivot_thresh=0.0,
            options=dict(SymmetricMode=True, Equil=False),
        )
    except RuntimeError:  # exactly singular
        return None
    if not np.array_equal(lu.perm_r, lu.perm_c):
        return None
    return lu


def inertia(A: sp.spmatrix) -> Optional[tuple]:
    """(n_positive, n_negative, n_zero) eigenvalue counts of a symmetric matrix."""
    if A.shape[0] <= 400:
        ev = np.linalg.eigvalsh(A.toarray() if sp.issparse(A) else A)
        tol = 1e-13 * max(1.0, np.abs(ev).max())
        return int((ev > tol).sum()), int((ev < -tol).sum()), int((np.abs(ev) <= tol).sum())
    lu = symmetric_lu(A)
    if lu is None:
        return None
    d = lu.U.diagonal()
    return int((d > 0).sum()), int((d < 0).sum()), int((d == 0).sum())


class SPDSolver:
    """Solves with a sparse SPD matrix; raises NotPositiveDefinite otherwise."""

    def __init__(self, A: sp.spmatrix, method: str = "direct", tol: float = 1e-12):
        self.A = sp.csr_matrix(A)
        self.method = method
        self.tol = tol
        if method == "direct":
            self.lu = symmetric_lu(self.A)
            d = None if self.lu is None else self.lu.U.diagonal()
            # pivots bound the smallest eigenvalue from above; near-zero ones mean singular
            if d is None or not np.all(d > PIVOT_RTOL * np.abs(d).max()):
                raise NotPositiveDefinite("matrix is not positive definite")
        elif method == "cg":
            if np.any(self.A.diagonal() <= 0):
                raise NotPositiveDefinite("matrix has a non-positive diagonal entry")
        else:
            raise ValueError(f"unknown solver method {method!r}")

    def solve(self, b: np.ndarray) -> np.ndarray:
        if self.method == "direct":
            return self.lu.solve(np.asarray(b, dtype=float))
        if b.ndim == 1:
            return solve_spd(self.A, b, self.tol)
        return np.column_stack([solve_spd(self.A, c, self.tol) for c in b.T])


def is_positive_definite(A: sp.spmatrix) -> bool:
    try:
        SPDSolver(A, "direct")
    except NotPositiveDefinite:
        return False
    return True


# ----------------------------------------------------------- Krylov engine


@dataclass
class _Ritz:
    mu: np.ndarray
    vectors: np.ndarray
    residuals: np.ndarray
    exhausted: bool


def _a_orthonormalize(W, V, AV, A, drop_tol=1e-10):
    """A-orthonormalise the columns of W against V and each other (two passes)."""
    out, aout = [], []
    for w in W.T:
        w = w.copy()
        w0 = np.sqrt(abs(w @ (A @ w)))
        if w0 == 0:
            continue
        for _ in range(2):
            if V.shape[1]:
                w -= V @ (AV.T @ w)
            for q, aq in zip(out, aout):
                w -= q * (aq @ w)
        aw = A @ w
        nrm2 = w @ aw
        if nrm2 <= (drop_tol * w0) ** 2:
            continue
        nrm = np.sqrt(nrm2)
        out.append(w / nrm)
        aout.append(aw / nrm)
    if not out:
        return np.zeros((W.shape[0], 0)), np.zeros((W.shape[0], 0))
    return np.column_stack(out), np.column_stack(aout)


def _krylov_extremes(
    A_sigma: sp.spmatrix,
    B: sp.spmatrix,
    solver: SPDSolver,
    n_pos: int,
    n_neg: int,
    sigma: float,
    A_orig: sp.spmatrix,
    tol: float,
    rng: np.random.Generator,
    block: int,
    max_dim: int,
    mu_floor: float,
) -> _Ritz:
    """Block Lanczos in the A_sigma inner product for the extreme mu of B v = mu A_sigma v.

    Residuals are measured on the unshifted problem, ||A x - lambda B x|| / ||A x||
    with lambda = sigma + 1/mu.
    """
    n = A_sigma.shape[0]
    X0 = rng.standard_normal((n, block))
    start = solver.solve(B @ X0)  # range of A^-1 B: drops the B kernel
    V, AV = _a_orthonormalize(start, np.zeros((n, 0)), np.zeros((n, 0)), A_sigma)
    BV = B @ V
    last = V
    exhausted = False
    while True:
        H = V.T @ BV
        H = 0.5 * (H + H.T)
        theta, S = np.linalg.eigh(H)
        keep = np.abs(theta) > mu_floor
        pos = np.nonzero(keep & (theta > 0))[0][::-1][:n_pos]
        neg = np.nonzero(keep & (theta < 0))[0][:n_neg]
        idx = np.concatenate([pos, neg]).astype(int)
        X = V @ S[:, idx]
        BX = BV @ S[:, idx]
        AX = AV @ S[:, idx] + sigma * BX
        lam = sigma + 1.0 / theta[idx]
        R = AX - BX * lam
        res = np.linalg.norm(R, axis=0) / np.maximum(np.linalg.norm(AX, axis=0), 1e-300)
        # a zero eigenvalue (singular A) has no meaningful unshifted residual
        zero = np.abs(lam) <= ZERO_LAMBDA
        if np.any(zero):
            ASX = AX[:, zero] - sigma * BX[:, zero]
            shifted = np.linalg.norm(ASX - BX[:, zero] / theta[idx][zero], axis=0)
            res[zero] = shifted / np.linalg.norm(ASX, axis=0)
        enough = len(pos) == n_pos and len(neg) == n_neg
        if exhausted or (enough and np.all(res <= tol)) or V.shape[1] >= max_dim:
            return _Ritz(theta[idx], X, res, exhausted)
        W = solver.solve(B @ last)
        if W.ndim == 1:
            W = W[:, None]
        new, anew = _a_orthonormalize(W, V, AV, A_sigma)
        if new.shape[1] < block and V.shape[1] + new.shape[1] < n:
            # (partial) invariant subspace found: continue from fresh directions
            extra = solver.solve(B @ rng.standard_normal((n, block - new.shape[1])))
            V2 = np.column_stack([V, new]) if new.shape[1] else V
            AV2 = np.column_stack([AV, anew]) if new.shape[1] else AV
            add, aadd = _a_orthonormalize(extra, V2, AV2, A_sigma)
            new = np.column_stack([new, add]) if new.shape[1] else add
            anew = np.column_stack([anew, aadd]) if anew.shape[1] else aadd
        if new.shape[1] == 0:
            exhausted = True
            continue
        V = np.column_stack([V, new])
        AV = np.column_stack([AV, anew])
        BV = np.column_stack([BV, B @ new])
        last = new


# ------------------------------------------------------------ Steklov pencil


def _norm1(M) -> float:
    return float(abs(M).sum(axis=0).max())


def base_shift(A: sp.spmatrix, B: sp.spmatrix, method: str = "direct") -> float:
    """0 if A is SPD, otherwise a small sigma (negative tried first) with A - sigma B SPD."""
    if is_positive_definite(A):
        return 0.0
    s = 1e-2 * _norm1(A) / max(_norm1(B), 1e-300)
    for _ in range(12):
        for sigma in (-s, s):
            if is_positive_definite((A - sigma * B).tocsr()):
                return sigma
        s /= 10
    raise NotPositiveDefinite("stiffness is singular and no shift makes the pencil definite")


def _positive_side(A, B, count, sigma, tol, rng, block, max_dim, method, refine):
    """Smallest positive eigenpairs of A u = lambda B u, refining the shift toward them.

    The negative side of (A, B) is the positive side of (A, -B); running both
    through this one routine makes rho -> -rho an exact symmetry.
    """
    mu_floor = 1e-10 * _norm1(B) / max(_norm1(A), 1e-300)
    wanted = count + 1  # one spare absorbs a possible lambda = 0 mode
    res = np.zeros(0)
    for _ in range(8):
        A_sigma = (A - sigma * B).tocsr() if sigma else A
        solver = SPDSolver(A_sigma, method)
        ritz = _krylov_extremes(
            A_sigma, B, solver, wanted, 0, sigma, A, tol, rng, block, max_dim,
            mu_floor / max(1.0, abs(sigma)),
        )
        lam = sigma + 1.0 / ritz.mu
        good = np.abs(lam) > ZERO_LAMBDA
        lam, vecs, res = lam[good], ritz.vectors[:, good], ritz.residuals[good]
        order = np.argsort(lam)
        lam, vecs, res = lam[order][:count], vecs[:, order][:, :count], res[order][:count]
        if len(lam) < count:
            # Ritz values of the wanted sign show up early whenever the B-form is
            # indefinite enough; none after the whole Krylov budget means none exist
            raise MissingEigenvalues(
                f"found only {len(lam)} of {count} eigenvalues of this sign "
                f"({'invariant subspace' if ritz.exhausted else 'Krylov budget'} exhausted)"
            )
        if np.all(res <= tol):
            return lam, vecs, res, sigma
        if not refine or len(lam) == 0 or not lam[0] > sigma:
            break
        # move the shift toward the wanted end while A - sigma B stays definite
        target = lam[0]
        gamma = 0.5
        while gamma < 1 - 1e-6:
            trial = target + gamma * (sigma - target)
            if is_positive_definite((A - trial * B).tocsr()):
                sigma = trial
                break
            gamma = 0.5 * (1 + gamma)
        else:
            break
        log.debug("refining shift to %.6g", sigma)
    raise SolverError(
        "Lanczos did not converge "
        f"(best residuals {np.array2string(res, precision=2)})"
    )


def steklov_eigs(
    A: sp.spmatrix,
    B: sp.spmatrix,
    k: int,
    k_neg: Optional[int] = None,
    shift: Optional[float] = None,
    tol: float = 1e-8,
    seed: int = 0,
    block: int = 3,
    max_dim: Optional[int] = None,
    method: str = "direct",
    refine: bool = True,
) -> SpectrumSlice:
    """k smallest positive and k_neg largest negative eigenvalues of A u = lambda B u.

    ``A`` must be SPD, or ``A - shift B`` must be (a singular ``A`` gets an
    automatic shift).  Vectors are normalised to ``v^T B v = +-1``.
    """
    A = sp.csr_matrix(A)
    B = sp.csr_matrix(B)
    if A.shape != B.shape:
        raise ValueError("A and B differ in shape")
    k_neg = k if k_neg is None else k_neg
    if k < 0 or k_neg < 0 or k + k_neg == 0:
        raise ValueError("need k >= 1 eigenvalues in total")
    n = A.shape[0]
    max_dim = min(n, max(10 * max(k, k_neg) + 40, 120)) if max_dim is None else max_dim
    block = max(1, min(block, n))
    out = SpectrumSlice()
    for sign, count in (("+", k), ("-", k_neg)):
        if count == 0:
            continue
        s = 1.0 if sign == "+" else -1.0
        Bs = B if sign == "+" else (-B).tocsr()
        sigma0 = base_shift(A, Bs, method) if shift is None else s * float(shift)
        out.shifts.setdefault("base", s * sigma0)
        rng = np.random.default_rng(seed)
        lam, vecs, res, sigma = _positive_side(A, Bs, count, sigma0, tol, rng, block, max_dim, method, refine)
        out.shifts[sign] = s * sigma
        pairs = []
        for j in range(len(lam)):
            v = _sign_fix(vecs[:, j])
            q = v @ (Bs @ v)
            v = v / np.sqrt(abs(q))
            pairs.append(EigenPair(float(s * lam[j]), v, float(res[j]), f"B-normalized:{'+' if s > 0 else '-'}1"))
        if sign == "+":
            out.positives = pairs
        else:
            out.negatives = pairs
    return out


def _sign_fix(v: np.ndarray) -> np.ndarray:
    """First component of non-negligible magnitude made positive."""
    big = np.nonzero(np.abs(v) > 1e-8 * np.abs(v).max())[0]
    return -v if big.size and v[big[0]] < 0 else v


def count_in_interval(A, B, tau: float) -> Optional[int]:
    """Number of eigenvalues of A u = lambda B u strictly between tau and 0 (A SPD).

    Uses the inertia of A - tau B; None when the inertia is unavailable.
    """
    ine = inertia((sp.csr_matrix(A) - tau * sp.csr_matrix(B)).tocsr())
    return None if ine is None else ine[1]


# --------------------------------------------------------- Dirichlet pencil


def dirichlet_eigs(
    K: sp.spmatrix,
    M: sp.spmatrix,
    k: int,
    tol: float = 1e-8,
    seed: int = 0,
    block: int = 3,
    max_dim: Optional[int] = None,
    method: str = "direct",
) -> list:
    """k smallest eigenvalues of K u = kappa M u, ascending, M-orthonormal vectors.

    Shift-invert at 0: the largest mu of M v = mu K v give kappa = 1/mu.
    """
    K = sp.csr_matrix(K)
    M = sp.csr_matrix(M)
    n = K.shape[0]
    if k > n:
        raise ValueError(f"k={k} exceeds the dimension {n}")
    if n <= 64:
        kappa, V = sla.eigh(K.toarray(), M.toarray())
        pairs = []
        for j in range(k):
            v = _sign_fix(V[:, j])
            r = np.linalg.norm(K @ v - kappa[j] * (M @ v)) / np.linalg.norm(K @ v)
            pairs.append(EigenPair(float(kappa[j]), v, float(r), "M-normalized"))
        return pairs
    max_dim = min(n, max(10 * k + 40, 120)) if max_dim is None else max_dim
    solver = SPDSolver(K, method)
    rng = np.random.default_rng(seed)
    ritz = _krylov_extremes(K, M, solver, k, 0, 0.0, K, tol, rng, max(1, min(block, n)), max_dim, 0.0)
    kappa = 1.0 / ritz.mu
    order = np.argsort(kappa)
    if len(order) < k or np.any(ritz.residuals[order] > tol):
        raise SolverError("Lanczos did not converge for the Dirichlet eigenvalues")
    pairs = []
    for j in order[:k]:
        v = _sign_fix(ritz.vectors[:, j])
        v = v / np.sqrt(v @ (M @ v))
        pairs.append(EigenPair(float(kappa[j]), v, float(ritz.residuals[j]), "M-normalized"))
    return pairs
