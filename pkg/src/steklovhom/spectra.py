"""Epsilon-level Steklov spectra, limit spectra and two-scale corrector expansions."""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .coeff import CoefficientTensor, DensityField
from .eigen import EigenPair, MissingEigenvalues, SpectrumSlice, dirichlet_eigs, steklov_eigs
from .fem import (
    DofMap, assemble_boundary_mass, assemble_stiffness, assemble_volume_mass, p1_gradients, reduce,
    stiffness_from_tensor,
)
from .geometry import CellGeometry, EpsilonLevel, Mesh, Tag, build_cell_mesh, build_perforated_domain_mesh
from .homog import EffectiveTensor, HomogenizedData, surface_average

NORMALIZATION = {
    "positive": "eps-scaled:+1",  # eps * int rho u u = +1 (and -1 for the negative sequence)
    "negative": "eps-scaled:-1",  # eps * int rho u u = -1 (and +1 for the positive sequence)
    "critical": "unscaled:+-1",  # int rho u u = +-1, no eps factor
}


class CaseMismatch(ValueError):
    pass


@dataclass
class EpsilonSpectrum:
    level: EpsilonLevel
    slice: SpectrumSlice
    normalization: str
    case: str
    mesh: Mesh
    norm_residuals: dict = field(default_factory=dict)  # sign -> list of |identity - (+-1)|
    note: str = ""

    @property
    def eps(self) -> float:
        return self.level.eps

    def values(self, sign: str) -> np.ndarray:
        return self.slice.values(sign)


@dataclass
class LimitSpectrum:
    case: str
    positives: list = field(default_factory=list)
    negatives: list = field(default_factory=list)
    mesh: Optional[Mesh] = None
    norm_residuals: dict = field(default_factory=dict)

    def values(self, sign: str) -> np.ndarray:
        pairs = self.positives if sign == "+" else self.negatives
        return np.array([p.eigenvalue for p in pairs])

    def pairs(self, sign: str) -> list:
        return self.positives if sign == "+" else self.negatives


# ------------------------------------------------------------ epsilon level


def solve_epsilon(
    geometry: CellGeometry,
    lvl: EpsilonLevel,
    a: CoefficientTensor,
    rho: DensityField,
    k: int,
    case: Optional[str] = None,
    cell: Optional[Mesh] = None,
    tol: float = 1e-8,
    seed: int = 0,
    sanity: bool = False,
    max_dofs: int = 200_000,
    method: str = "direct",
) -> EpsilonSpectrum:
    """Steklov spectrum on the perforated square with Dirichlet data on its outer boundary.

    With ``sanity`` a density without negative part is accepted and the
    negative list comes back empty.
    """
    cell = build_cell_mesh(geometry) if cell is None else cell
    if case is None:
        from .homog import detect_case, hole_perimeter

        case = detect_case(surface_average(cell, rho), hole_perimeter(cell))
    if case not in NORMALIZATION:
        raise ValueError(f"unknown case {case!r}")
    mesh = build_perforated_domain_mesh(geometry, lvl, max_dofs=max_dofs, cell=cell)
    eps = lvl.eps
    dof = DofMap.dirichlet(mesh)
    A = reduce(assemble_stiffness(mesh, a, eps), dof)
    B = reduce(assemble_boundary_mass(mesh, rho, Tag.HOLE, eps), dof)
    note = ""
    try:
        sl = steklov_eigs(A, B, k, k, tol=tol, seed=seed, method=method)
    except MissingEigenvalues:
        if not sanity:
            raise
        sl = steklov_eigs(A, B, k, 0, tol=tol, seed=seed, method=method)
        note = "no negative spectrum"
    factor = 1.0 if case == "critical" else eps
    Bfull = assemble_boundary_mass(mesh, rho, Tag.HOLE, eps)
    residuals = {}
    for sign, pairs in (("+", sl.positives), ("-", sl.negatives)):
        target = 1.0 if sign == "+" else -1.0
        residuals[sign] = []
        for p in pairs:
            # the solver gives v^T B v = +-1; the case identity is factor * v^T B v = +-1
            p.vector = dof.expand(p.vector / math.sqrt(factor))
            p.normalization_tag = NORMALIZATION[case]
            residuals[sign].append(abs(factor * float(p.vector @ (Bfull @ p.vector)) - target))
    return EpsilonSpectrum(lvl, sl, NORMALIZATION[case], case, mesh, residuals, note)


def cross_orthogonality(spec: EpsilonSpectrum, rho: DensityField, a: Optional[CoefficientTensor] = None) -> float:
    """Largest |factor * int rho u^k u^l| over distinct pairs of the same sign."""
    Bf = assemble_boundary_mass(spec.mesh, rho, Tag.HOLE, spec.eps)
    factor = 1.0 if spec.case == "critical" else spec.eps
    worst = 0.0
    for pairs in (spec.slice.positives, spec.slice.negatives):
        V = np.column_stack([p.vector for p in pairs]) if pairs else np.zeros((spec.mesh.n_nodes, 0))
        G = factor * V.T @ (Bf @ V)
        if G.size:
            worst = max(worst, float(np.abs(G - np.diag(np.diag(G))).max()))
    return worst


# ------------------------------------------------------------- limit problems


def _dirichlet_spectrum(q: EffectiveTensor, scale: float, mesh: Mesh, k: int, tol: float, seed: int):
    abar = np.broadcast_to(q.matrix() * scale, (len(mesh.triangles), 2, 2))
    dof = DofMap.dirichlet(mesh)
    K = reduce(stiffness_from_tensor(mesh, np.ascontiguousarray(abar)), dof)
    M = reduce(assemble_volume_mass(mesh), dof)
    pairs = dirichlet_eigs(K, M, k, tol=tol, seed=seed)
    for p in pairs:
        p.vector = dof.expand(p.vector)
    return pairs, assemble_volume_mass(mesh)


def _check_spd(q: EffectiveTensor, name: str):
    if not q.min_eigenvalue() > 0:
        raise ValueError(f"{name} is not positive definite")


def solve_limit_positive(q: EffectiveTensor, M_S_rho: float, omega_mesh: Mesh, k: int,
                         tol: float = 1e-10, seed: int = 0) -> LimitSpectrum:
    """-div(q/M_S grad u) = lambda u in the square, u = 0 on its boundary; int u^2 = 1/M_S."""
    if not M_S_rho > 0:
        raise CaseMismatch("positive limit problem needs M_S(rho) > 0")
    _check_spd(q, "q")
    pairs, M = _dirichlet_spectrum(q, 1.0 / M_S_rho, omega_mesh, k, tol, seed)
    res = []
    for p in pairs:
        p.vector = p.vector / math.sqrt(M_S_rho)
        p.normalization_tag = "L2=1/M_S"
        res.append(abs(float(p.vector @ (M @ p.vector)) - 1.0 / M_S_rho))
    return LimitSpectrum("positive", positives=pairs, mesh=omega_mesh, norm_residuals={"+": res})


def solve_limit_negative(q_tilde: EffectiveTensor, M_S_rho_tilde: float, omega_mesh: Mesh, k: int,
                         tol: float = 1e-10, seed: int = 0) -> LimitSpectrum:
    """-div(q~/M_S(rho~) grad v) = xi v with M_S(rho~) < 0: 0 > xi^1 > xi^2 >= ...; int v^2 = -1/M_S(rho~)."""
    if not M_S_rho_tilde < 0:
        raise CaseMismatch("negative limit problem needs M_S(rho~) < 0")
    _check_spd(q_tilde, "q~")
    pairs, M = _dirichlet_spectrum(q_tilde, 1.0 / abs(M_S_rho_tilde), omega_mesh, k, tol, seed)
    res = []
    for p in pairs:
        p.eigenvalue = -p.eigenvalue
        p.vector = p.vector / math.sqrt(abs(M_S_rho_tilde))
        p.normalization_tag = "L2=-1/M_S(rho~)"
        res.append(abs(float(p.vector @ (M @ p.vector)) + 1.0 / M_S_rho_tilde))
    return LimitSpectrum("negative", negatives=pairs, mesh=omega_mesh, norm_residuals={"-": res})


def solve_limit_pencil(q: EffectiveTensor, nu_sq: float, omega_mesh: Mesh, k: int,
                       tol: float = 1e-10, seed: int = 0) -> LimitSpectrum:
    """Quadratic pencil -div(q grad u) = lambda^2 nu^2 u: lambda = +-sqrt(kappa / nu^2)."""
    if not nu_sq > 0:
        raise ValueError("nu^2 must be positive")
    _check_spd(q, "q")
    pairs, M = _dirichlet_spectrum(q, 1.0, omega_mesh, k, tol, seed)
    pos, neg, rp, rn = [], [], [], []
    for p in pairs:
        lam = math.sqrt(p.eigenvalue / nu_sq)
        # int u^2 = +-1 / (2 lambda nu^2), the same function for both signs
        v = p.vector / math.sqrt(2.0 * lam * nu_sq)
        pos.append(EigenPair(lam, v, p.residual_norm, "L2=1/(2 lambda nu^2)"))
        neg.append(EigenPair(-lam, v.copy(), p.residual_norm, "L2=1/(2 lambda nu^2)"))
        l2 = float(v @ (M @ v))
        rp.append(abs(l2 - 1.0 / (2 * lam * nu_sq)))
        rn.append(abs(-l2 - (-1.0) / (2 * lam * nu_sq)))
    return LimitSpectrum("critical", positives=pos, negatives=neg, mesh=omega_mesh, norm_residuals={"+": rp, "-": rn})


# ------------------------------------------------------------ point location


class PointLocator:
    """Barycentric point location on a triangulation of a subset of [0,1]^2."""

    def __init__(self, mesh: Mesh, buckets: Optional[int] = None):
        self.mesh = mesh
        nb = buckets or max(1, int(math.sqrt(len(mesh.triangles) / 2)))
        self.nb = nb
        p = mesh.nodes[mesh.triangles]  # (M, 3, 2)
        lo = np.clip(np.floor(p.min(axis=1) * nb - 1e-9).astype(int), 0, nb - 1)
        hi = np.clip(np.floor(p.max(axis=1) * nb + 1e-9).astype(int), 0, nb - 1)
        lists = [[] for _ in range(nb * nb)]
        for t in range(len(p)):
            for i in range(lo[t, 0], hi[t, 0] + 1):
                for j in range(lo[t, 1], hi[t, 1] + 1):
                    lists[i * nb + j].append(t)
        width = max(len(c) for c in lists)
        self.table = np.full((nb * nb, width), -1, dtype=np.int64)
        for b, c in enumerate(lists):
            self.table[b, : len(c)] = c
        a, b_, c_ = p[:, 0], p[:, 1], p[:, 2]
        self.origin = a
        T = np.stack([b_ - a, c_ - a], axis=2)  # (M, 2, 2) columns are edge vectors
        self.Tinv = np.linalg.inv(T)

    def locate(self, pts: np.ndarray, tol: float = 1e-10):
        """Triangle index and barycentric weights (N, 3) for each point; raises on failure."""
        pts = np.atleast_2d(np.asarray(pts, dtype=float))
        ij = np.clip(np.floor(pts * self.nb).astype(int), 0, self.nb - 1)
        cand = self.table[ij[:, 0] * self.nb + ij[:, 1]]  # (N, W)
        tri = np.full(len(pts), -1, dtype=np.int64)
        bary = np.zeros((len(pts), 3))
        best = np.full(len(pts), -np.inf)
        for w in range(cand.shape[1]):
            t = cand[:, w]
            ok = t >= 0
            ts = np.where(ok, t, 0)
            loc = np.einsum("nij,nj->ni", self.Tinv[ts], pts - self.origin[ts])
            lam = np.column_stack([1 - loc.sum(axis=1), loc])
            score = np.where(ok, lam.min(axis=1), -np.inf)
            better = score > best
            best = np.where(better, score, best)
            tri = np.where(better, t, tri)
            bary[better] = lam[better]
        if np.any(best < -tol):
            bad = int(np.argmax(best < -tol))
            raise ValueError(f"point {pts[bad]} lies outside the mesh")
        return tri, bary

    def interpolate(self, values: np.ndarray, pts: np.ndarray) -> np.ndarray:
        tri, bary = self.locate(pts)
        return np.einsum("ni,ni->n", bary, values[self.mesh.triangles[tri]])


# --------------------------------------------------------- corrector expansion


@dataclass
class CorrectorExpansion:
    """u0 + eps u1 with u1(x, y) = -sum_j du0/dx_j(x) chi^j(y) (+ lambda0 u0 chi^0 for the pencil).

    For the negative sequence the reconstruction is theta(x/eps) (v0 + eps v1)
    built from the weighted correctors.
    """

    u0: np.ndarray
    omega_mesh: Mesh
    cell_mesh: Mesh
    chi: list
    chi0: Optional[np.ndarray] = None
    lambda0: float = 0.0
    theta: Optional[np.ndarray] = None

    def __post_init__(self):
        self._omega = PointLocator(self.omega_mesh)
        self._cell = PointLocator(self.cell_mesh)
        grads, _ = p1_gradients(self.omega_mesh)
        self._du0 = np.einsum("mik,mi->mk", grads, self.u0[self.omega_mesh.triangles])

    def parts(self, x: np.ndarray, eps: float):
        """(u0(x), u1(x, x/eps), theta(x/eps)) at the points x."""
        x = np.atleast_2d(np.asarray(x, dtype=float))
        tri, bary = self._omega.locate(x)
        u0 = np.einsum("ni,ni->n", bary, self.u0[self.omega_mesh.triangles[tri]])
        du0 = self._du0[tri]
        y = x / eps
        y = y - np.floor(y)
        ctri, cbary = self._cell.locate(y)
        ct = self.cell_mesh.triangles[ctri]

        def at_y(f):
            return np.einsum("ni,ni->n", cbary, np.asarray(f)[ct])

        u1 = -sum(du0[:, j] * at_y(self.chi[j]) for j in range(2))
        if self.chi0 is not None:
            u1 = u1 + self.lambda0 * u0 * at_y(self.chi0)
        th = at_y(self.theta) if self.theta is not None else np.ones(len(x))
        return u0, u1, th

    def leading(self, x, eps: float) -> np.ndarray:
        u0, _, th = self.parts(x, eps)
        return th * u0

    def __call__(self, x, eps: float) -> np.ndarray:
        u0, u1, th = self.parts(x, eps)
        return th * (u0 + eps * u1)


def build_corrector_expansion(limit: LimitSpectrum, homog: HomogenizedData, k: int, cell_mesh: Mesh,
                              sign: Optional[str] = None) -> CorrectorExpansion:
    """Expansion of the k-th (1-based) limit eigenfunction of the given sign."""
    if limit.mesh is None:
        raise ValueError("limit spectrum carries no mesh")
    if limit.case == "critical":
        if homog.case != "critical" or homog.chi0 is None:
            raise CaseMismatch("critical limit spectrum needs critical homogenized data")
        sign = sign or "+"
        pair = limit.pairs(sign)[k - 1]
        return CorrectorExpansion(pair.vector, limit.mesh, cell_mesh, [c.values for c in homog.chi],
                                  homog.chi0.values, pair.eigenvalue)
    if limit.case == "positive":
        if homog.case == "critical":
            raise CaseMismatch("positive limit spectrum with critical homogenized data")
        pair = limit.positives[k - 1]
        return CorrectorExpansion(pair.vector, limit.mesh, cell_mesh, [c.values for c in homog.chi])
    if limit.case == "negative":
        if homog.local is None or not homog.chi_tilde:
            raise CaseMismatch("negative limit spectrum needs the local Steklov data")
        pair = limit.negatives[k - 1]
        return CorrectorExpansion(pair.vector, limit.mesh, cell_mesh, [c.values for c in homog.chi_tilde],
                                  theta=homog.local.theta1_neg)
    raise ValueError(f"unknown case {limit.case!r}")


def projection_distance(u: np.ndarray, w: np.ndarray) -> float:
    """min_c ||u - c w|| / ||u||: node-wise distance after sign and scale matching."""
    ww = float(w @ w)
    if ww == 0:
        return 1.0
    c = float(u @ w) / ww
    return float(np.linalg.norm(u - c * w) / np.linalg.norm(u))
