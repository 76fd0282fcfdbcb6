"""P1 assembly, constraint reduction and the SPD linear solver."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from .coeff import CoefficientTensor, DensityField
from .geometry import Mesh, Tag

GAUSS2 = (0.5 - 0.5 / np.sqrt(3.0), 0.5 + 0.5 / np.sqrt(3.0))


class SolverError(RuntimeError):
    """A linear or eigen solve failed to converge or met an indefinite operator."""


def symmetric_from_triplets(rows, cols, vals, n: int) -> sp.csr_matrix:
    """Build an exactly symmetric matrix from triplets of a symmetric operator.

    Only the upper triangle (row <= col) is kept; duplicates are summed in
    canonical order and the lower triangle is mirrored.
    """
    rows = np.asarray(rows).ravel()
    cols = np.asarray(cols).ravel()
    vals = np.asarray(vals, dtype=float).ravel()
    keep = rows <= cols
    upper = sp.coo_matrix((vals[keep], (rows[keep], cols[keep])), shape=(n, n)).tocsr()
    upper.sum_duplicates()
    upper.sort_indices()
    strict = sp.triu(upper, k=1, format="csr")
    out = (upper + strict.T).tocsr()
    out.sort_indices()
    return out


# ------------------------------------------------------------------ geometry


def p1_gradients(mesh: Mesh):
    """Per-triangle basis gradients, shape (M, 3, 2), and areas, shape (M,)."""
    p = mesh.nodes[mesh.triangles]  # (M, 3, 2)
    x, y = p[..., 0], p[..., 1]
    area = 0.5 * ((x[:, 1] - x[:, 0]) * (y[:, 2] - y[:, 0]) - (x[:, 2] - x[:, 0]) * (y[:, 1] - y[:, 0]))
    grads = np.empty(p.shape)
    for i in range(3):
        j, k = (i + 1) % 3, (i + 2) % 3
        grads[:, i, 0] = (y[:, j] - y[:, k]) / (2 * area)
        grads[:, i, 1] = (x[:, k] - x[:, j]) / (2 * area)
    return grads, area


def cell_coordinates(x: np.ndarray, eps: Optional[float]) -> np.ndarray:
    """Fast variable y = x/eps wrapped into [0,1)^2 (identity when eps is None)."""
    if eps is None:
        return x
    y = x / eps
    return y - np.floor(y)


def midpoints(mesh: Mesh) -> np.ndarray:
    """Edge midpoints of every triangle, shape (M, 3, 2)."""
    p = mesh.nodes[mesh.triangles]
    return 0.5 * (p + p[:, [1, 2, 0], :])


def tensor_at_midpoints(mesh: Mesh, a: CoefficientTensor, eps: Optional[float] = None, weight=None):
    """Quadrature-averaged tensor per triangle: (M, 2, 2).

    The three-point edge-midpoint rule; ``weight`` (shape (M, 3)) multiplies
    the coefficient at each midpoint.
    """
    y = cell_coordinates(midpoints(mesh), eps)
    a11, a12, a22 = a.values(y[..., 0], y[..., 1])
    w = np.ones(a11.shape) if weight is None else np.asarray(weight, dtype=float)
    abar = np.empty((len(mesh.triangles), 2, 2))
    abar[:, 0, 0] = np.mean(w * a11, axis=1)
    abar[:, 0, 1] = abar[:, 1, 0] = np.mean(w * a12, axis=1)
    abar[:, 1, 1] = np.mean(w * a22, axis=1)
    return abar


# ---------------------------------------------------------------- assembly


def stiffness_from_tensor(mesh: Mesh, abar: np.ndarray) -> sp.csr_matrix:
    grads, area = p1_gradients(mesh)
    local = area[:, None, None] * np.einsum("mik,mkl,mjl->mij", grads, abar, grads)
    t = mesh.triangles
    rows = np.repeat(t, 3, axis=1)
    cols = np.tile(t, (1, 3))
    return symmetric_from_triplets(rows, cols, local.reshape(len(t), 9), mesh.n_nodes)


def assemble_stiffness(mesh: Mesh, a: CoefficientTensor, eps: Optional[float] = None, weight=None) -> sp.csr_matrix:
    """Stiffness sum_K int_K a D(phi_j).D(phi_i), coefficient at y = x/eps mod 1."""
    return stiffness_from_tensor(mesh, tensor_at_midpoints(mesh, a, eps, weight))


def gauss_points(mesh: Mesh, edges: np.ndarray):
    """Two Gauss points per edge: coordinates (K, 2, 2), basis values (K, 2, 2), lengths (K,)."""
    pa = mesh.nodes[edges[:, 0]]
    pb = mesh.nodes[edges[:, 1]]
    t = np.array(GAUSS2)
    pts = pa[:, None, :] * (1 - t)[None, :, None] + pb[:, None, :] * t[None, :, None]
    phi = np.stack([1 - t, t], axis=1)  # (gauss point, endpoint)
    length = np.hypot(*(pb - pa).T)
    return pts, np.broadcast_to(phi, (len(edges), 2, 2)), length


def assemble_boundary_mass(
    mesh: Mesh, rho: DensityField, tag=Tag.HOLE, eps: Optional[float] = None, weight=None
) -> sp.csr_matrix:
    """Boundary mass sum_e int_e rho phi_j phi_i over edges carrying ``tag``.

    ``weight`` (shape (K, 2)) multiplies rho at each Gauss point.
    """
    edges = mesh.edges_with_tag(tag)
    if len(edges) == 0:
        raise ValueError(f"mesh has no boundary edges tagged {Tag(tag).name}")
    pts, phi, length = gauss_points(mesh, edges)
    y = cell_coordinates(pts, eps)
    r = np.asarray(rho(y[..., 0], y[..., 1]), dtype=float) * np.broadcast_to(length[:, None], (len(edges), 2))
    if weight is not None:
        r = r * weight
    # local[e, a, b] = sum_g (L/2) rho(g) phi_a(g) phi_b(g)
    local = 0.5 * np.einsum("eg,ega,egb->eab", r, phi, phi)
    rows = np.repeat(edges, 2, axis=1)
    cols = np.tile(edges, (1, 2))
    return symmetric_from_triplets(rows, cols, local.reshape(len(edges), 4), mesh.n_nodes)


def assemble_volume_mass(mesh: Mesh) -> sp.csr_matrix:
    _, area = p1_gradients(mesh)
    ref = (np.ones((3, 3)) + np.eye(3)) / 12.0
    local = area[:, None, None] * ref[None]
    t = mesh.triangles
    rows = np.repeat(t, 3, axis=1)
    cols = np.tile(t, (1, 3))
    return symmetric_from_triplets(rows, cols, local.reshape(len(t), 9), mesh.n_nodes)


def lumped_boundary_load(B: sp.spmatrix) -> np.ndarray:
    """int_S rho phi_i dsigma, i.e. the action of the boundary mass on the constant 1."""
    return np.asarray(B.sum(axis=1)).ravel()


def gradient_load(mesh: Mesh, abar: np.ndarray, j: int) -> np.ndarray:
    """Load vector of l_j(v) = sum_k int a_kj dv/dy_k (j = 0 or 1)."""
    grads, area = p1_gradients(mesh)
    col = abar[:, :, j]  # (M, 2): a_kj
    local = area[:, None] * np.einsum("mik,mk->mi", grads, col)
    return np.bincount(mesh.triangles.ravel(), weights=local.ravel(), minlength=mesh.n_nodes)


# ------------------------------------------------------------- constraints


@dataclass
class DofMap:
    """Map from mesh nodes to the reduced unknowns.

    ``master[i]`` is i for a free node, the (free) master of a slave, and -1
    for a Dirichlet node. ``pin`` is the reduced index fixed to zero during
    solves when the space is mean-free.
    """

    master: np.ndarray
    mean_zero: bool = False

    def __post_init__(self):
        self.master = np.asarray(self.master, dtype=np.int64)
        n = len(self.master)
        free = self.master == np.arange(n)
        if np.any((self.master >= 0) & ~free[np.clip(self.master, 0, n - 1)]):
            raise ValueError("slave chains must have length one")
        self.free_nodes = np.nonzero(free)[0]
        self.reduced_index = np.full(n, -1, dtype=np.int64)
        self.reduced_index[self.free_nodes] = np.arange(len(self.free_nodes))
        self.col = np.where(self.master >= 0, self.reduced_index[np.clip(self.master, 0, n - 1)], -1)
        self.pin = 0 if self.mean_zero and len(self.free_nodes) else None

    @property
    def n_full(self) -> int:
        return len(self.master)

    @property
    def n_reduced(self) -> int:
        return len(self.free_nodes)

    @classmethod
    def unconstrained(cls, n: int) -> "DofMap":
        return cls(np.arange(n))

    @classmethod
    def dirichlet(cls, mesh: Mesh, tag=Tag.DIRICHLET) -> "DofMap":
        master = np.arange(mesh.n_nodes)
        master[np.unique(mesh.edges_with_tag(tag).ravel())] = -1
        return cls(master)

    @classmethod
    def periodic(cls, mesh: Mesh, mean_zero: bool = True) -> "DofMap":
        master = np.arange(mesh.n_nodes)
        direct = dict(mesh.ppairs.tolist())
        for s in direct:
            r = s
            while r in direct:
                r = direct[r]
            master[s] = r
        return cls(master, mean_zero=mean_zero)

    def prolongation(self) -> sp.csr_matrix:
        """P with full = P @ reduced (slaves copy their master, Dirichlet rows are zero)."""
        rows = np.nonzero(self.col >= 0)[0]
        return sp.csr_matrix(
            (np.ones(len(rows)), (rows, self.col[rows])), shape=(self.n_full, self.n_reduced)
        )

    def restrict(self, full: np.ndarray) -> np.ndarray:
        return np.asarray(full)[self.free_nodes]

    def expand(self, reduced: np.ndarray) -> np.ndarray:
        out = np.zeros(self.n_full)
        ok = self.col >= 0
        out[ok] = np.asarray(reduced)[self.col[ok]]
        return out


def reduce(matrix: sp.spmatrix, dofmap: DofMap) -> sp.csr_matrix:
    """Congruence P^T A P: Dirichlet rows/cols dropped, slaves folded into masters."""
    if matrix.shape != (dofmap.n_full, dofmap.n_full):
        raise ValueError(f"matrix shape {matrix.shape} does not match dof map size {dofmap.n_full}")
    if dofmap.n_reduced == 0:
        raise ValueError("no free degrees of freedom left after constraints")
    P = dofmap.prolongation()
    R = (P.T @ matrix @ P).tocsr()
    R = symmetric_from_triplets(*sp.find(R), R.shape[0])
    return R


def reduce_vector(vec: np.ndarray, dofmap: DofMap) -> np.ndarray:
    return dofmap.prolongation().T @ np.asarray(vec, dtype=float)


# ------------------------------------------------------------------ solver


def solve_spd(matrix: sp.spmatrix, rhs: np.ndarray, tol: float = 1e-10, maxiter: Optional[int] = None) -> np.ndarray:
    """Jacobi-preconditioned conjugate gradients; raises SolverError on failure."""
    A = sp.csr_matrix(matrix)
    b = np.asarray(rhs, dtype=float)
    n = A.shape[0]
    if n == 0:
        raise ValueError("empty system")
    if not np.any(b):
        return np.zeros(n)
    d = A.diagonal()
    if np.any(d <= 0):
        raise SolverError("matrix has a non-positive diagonal entry; not SPD")
    maxiter = 20 * n if maxiter is None else maxiter
    M = sp.diags(1.0 / d)
    x, info = spla.cg(A, b, rtol=tol, atol=0.0, maxiter=maxiter, M=M)
    res = np.linalg.norm(b - A @ x) / np.linalg.norm(b)
    if info != 0 or not res <= 10 * tol:
        raise SolverError(f"conjugate gradients did not converge (relative residual {res:.3e})")
    return x


def volume_mean(u: np.ndarray, mass: sp.spmatrix) -> float:
    w = np.asarray(mass.sum(axis=0)).ravel()
    return float(w @ u / w.sum())


def solve_constrained(
    A_full: sp.spmatrix,
    rhs_full: np.ndarray,
    dofmap: DofMap,
    mass: Optional[sp.spmatrix] = None,
    tol: float = 1e-12,
) -> np.ndarray:
    """Solve on the constrained space and return a full nodal field.

    For a mean-free dof map one reduced unknown is pinned to 0 and the result
    is shifted to zero volume mean (``mass`` is the full volume mass matrix).
    """
    A = reduce(A_full, dofmap)
    b = reduce_vector(rhs_full, dofmap)
    if dofmap.pin is None:
        return dofmap.expand(solve_spd(A, b, tol))
    keep = np.ones(A.shape[0], dtype=bool)
    keep[dofmap.pin] = False
    x = np.zeros(A.shape[0])
    x[keep] = solve_spd(A[keep][:, keep], b[keep], tol)
    u = dofmap.expand(x)
    if mass is not None:
        u = u - volume_mean(u, mass)
    return u


__all__: Sequence[str] = [
    "DofMap", "SolverError", "assemble_boundary_mass", "assemble_stiffness", "assemble_volume_mass",
    "gradient_load", "lumped_boundary_load", "p1_gradients", "reduce", "reduce_vector", "solve_constrained",
    "solve_spd", "stiffness_from_tensor", "symmetric_from_triplets", "tensor_at_midpoints",
]
