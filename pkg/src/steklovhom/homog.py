"""Periodic cell problems and effective (homogenized) data."""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .coeff import CoefficientTensor, DensityField, Field
from .eigen import MissingEigenvalues, steklov_eigs
from .fem import (
    DofMap, assemble_boundary_mass, assemble_volume_mass, gauss_points, gradient_load, lumped_boundary_load,
    p1_gradients, reduce, solve_constrained, stiffness_from_tensor, tensor_at_midpoints,
)
from .geometry import Mesh, Tag

SCHEMA = "homogdata 1"
TOL_ZERO = 1e-10


class HomogError(RuntimeError):
    pass


@dataclass
class CorrectorField:
    which: str  # "chi1" | "chi2" | "chi0" | "chi1~" | "chi2~"
    values: np.ndarray
    mean: float = 0.0


@dataclass
class EffectiveTensor:
    q11: float
    q12: float
    q22: float

    def matrix(self) -> np.ndarray:
        return np.array([[self.q11, self.q12], [self.q12, self.q22]])

    def min_eigenvalue(self) -> float:
        return float(np.linalg.eigvalsh(self.matrix())[0])

    def scaled(self, c: float) -> "EffectiveTensor":
        return EffectiveTensor(c * self.q11, c * self.q12, c * self.q22)

    def to_list(self):
        return [self.q11, self.q12, self.q22]


@dataclass
class LocalSteklovData:
    lambda1_neg: float
    theta1_neg: np.ndarray
    surface_integral_rho_theta_sq: float


@dataclass
class HomogenizedData:
    q: EffectiveTensor
    M_S_rho: float
    case: str  # "positive" | "negative" | "critical"
    perimeter: float
    chi: list = field(default_factory=list)  # [chi1, chi2]
    density_sign: int = 1  # -1: data below refers to -rho (negative case reduction)
    chi0: Optional[CorrectorField] = None
    nu_sq: Optional[float] = None
    local: Optional[LocalSteklovData] = None
    q_tilde: Optional[EffectiveTensor] = None
    M_S_rho_tilde: Optional[float] = None
    chi_tilde: list = field(default_factory=list)
    mesh_checksum: str = ""

    def to_json(self) -> dict:
        def arr(f):
            return None if f is None else np.asarray(f).tolist()

        return {
            "schema": SCHEMA,
            "case": self.case,
            "M_S_rho": self.M_S_rho,
            "perimeter": self.perimeter,
            "density_sign": self.density_sign,
            "q": self.q.to_list(),
            "chi": [arr(c.values) for c in self.chi],
            "chi0": arr(self.chi0.values) if self.chi0 else None,
            "nu_sq": self.nu_sq,
            "lambda1_neg": self.local.lambda1_neg if self.local else None,
            "theta1_neg": arr(self.local.theta1_neg) if self.local else None,
            "surface_integral_rho_theta_sq": self.local.surface_integral_rho_theta_sq if self.local else None,
            "q_tilde": self.q_tilde.to_list() if self.q_tilde else None,
            "M_S_rho_tilde": self.M_S_rho_tilde,
            "chi_tilde": [arr(c.values) for c in self.chi_tilde],
            "mesh_checksum": self.mesh_checksum,
        }

    @classmethod
    def from_json(cls, d: dict) -> "HomogenizedData":
        if d.get("schema") != SCHEMA:
            raise ValueError(f"expected schema {SCHEMA!r}, got {d.get('schema')!r}")
        local = None
        if d.get("lambda1_neg") is not None:
            local = LocalSteklovData(d["lambda1_neg"], np.array(d["theta1_neg"]), d["surface_integral_rho_theta_sq"])
        return cls(
            q=EffectiveTensor(*d["q"]),
            M_S_rho=d["M_S_rho"],
            case=d["case"],
            perimeter=d["perimeter"],
            chi=[CorrectorField(f"chi{j + 1}", np.array(v)) for j, v in enumerate(d["chi"])],
            density_sign=d.get("density_sign", 1),
            chi0=CorrectorField("chi0", np.array(d["chi0"])) if d.get("chi0") is not None else None,
            nu_sq=d.get("nu_sq"),
            local=local,
            q_tilde=EffectiveTensor(*d["q_tilde"]) if d.get("q_tilde") else None,
            M_S_rho_tilde=d.get("M_S_rho_tilde"),
            chi_tilde=[CorrectorField(f"chi{j + 1}~", np.array(v)) for j, v in enumerate(d.get("chi_tilde") or [])],
            mesh_checksum=d.get("mesh_checksum", ""),
        )

    def dumps(self) -> str:
        return json.dumps(self.to_json())


# ------------------------------------------------------------ surface data


def hole_perimeter(mesh: Mesh) -> float:
    e = mesh.edges_with_tag(Tag.HOLE)
    d = mesh.nodes[e[:, 1]] - mesh.nodes[e[:, 0]]
    return float(np.hypot(d[:, 0], d[:, 1]).sum())


def surface_average(mesh: Mesh, rho: DensityField) -> float:
    """Two-point Gauss quadrature of rho over the hole boundary."""
    B = assemble_boundary_mass(mesh, rho, Tag.HOLE)
    return float(B.sum())


def detect_case(M_S: float, perimeter: float, tol_zero: float = TOL_ZERO, override: Optional[str] = None) -> str:
    if override is not None:
        if override not in ("positive", "negative", "critical"):
            raise ValueError(f"unknown case {override!r}")
        return override
    if abs(M_S) <= tol_zero * perimeter:
        return "critical"
    return "positive" if M_S > 0 else "negative"


# --------------------------------------------------------------- correctors


class CellProblem:
    """Assembled periodic cell operators for one (mesh, tensor, weight) triple."""

    def __init__(self, mesh: Mesh, a: CoefficientTensor, weight=None):
        if len(mesh.ppairs) == 0:
            raise HomogError("cell mesh has no periodic pairs")
        self.mesh = mesh
        self.abar = tensor_at_midpoints(mesh, a, None, weight)
        self.K = stiffness_from_tensor(mesh, self.abar)
        self.mass = assemble_volume_mass(mesh)
        self.dofmap = DofMap.periodic(mesh, mean_zero=True)
        self.grads, self.area = p1_gradients(mesh)

    def solve(self, rhs: np.ndarray, tol: float = 1e-12) -> np.ndarray:
        return solve_constrained(self.K, rhs, self.dofmap, self.mass, tol)

    def energy(self, u: np.ndarray, v: np.ndarray) -> float:
        return float(u @ (self.K @ v))

    def mean_gradients(self, u: np.ndarray) -> np.ndarray:
        """Per-triangle gradient of a nodal field, (M, 2)."""
        return np.einsum("mik,mi->mk", self.grads, u[self.mesh.triangles])


def solve_corrector(mesh: Mesh, a: CoefficientTensor, j: int, weight=None, cell: Optional[CellProblem] = None) -> CorrectorField:
    """chi^j: a(chi, v) = sum_k int a_kj dv/dy_k on H^1_per(Y*)/R (j = 1 or 2)."""
    if j not in (1, 2):
        raise ValueError("j must be 1 or 2")
    cell = CellProblem(mesh, a, weight) if cell is None else cell
    u = cell.solve(gradient_load(mesh, cell.abar, j - 1))
    name = f"chi{j}" if weight is None else f"chi{j}~"
    return CorrectorField(name, u, float(u @ cell.mass.sum(axis=0).A1))


def effective_tensor(mesh: Mesh, a: CoefficientTensor, chi1: CorrectorField, chi2: CorrectorField,
                     weight=None, cell: Optional[CellProblem] = None) -> EffectiveTensor:
    """q_ij = int a_ij - sum_l int a_il d(chi^j)/dy_l, same quadrature as the stiffness."""
    cell = CellProblem(mesh, a, weight) if cell is None else cell
    for c in (chi1, chi2):
        if len(c.values) != mesh.n_nodes:
            raise HomogError("corrector does not live on this mesh")
    q = np.empty((2, 2))
    for j, chi in enumerate((chi1, chi2)):
        g = cell.mean_gradients(chi.values)  # (M, 2)
        flux = cell.abar[:, :, j] - np.einsum("mil,ml->mi", cell.abar, g)
        q[:, j] = cell.area @ flux
    if abs(q[0, 1] - q[1, 0]) > 1e-10 * max(1.0, np.abs(q).max()):
        raise HomogError(f"effective tensor not symmetric: q12={q[0, 1]:.3e}, q21={q[1, 0]:.3e}")
    return EffectiveTensor(float(q[0, 0]), float(0.5 * (q[0, 1] + q[1, 0])), float(q[1, 1]))


def energy_tensor(cell: CellProblem, chi1: CorrectorField, chi2: CorrectorField) -> np.ndarray:
    """q_ij = int a (e_j - D chi^j) . (e_i - D chi^i), the corrector-energy form."""
    cols = []
    for j, chi in enumerate((chi1, chi2)):
        e = np.zeros(2)
        e[j] = 1.0
        cols.append(e[None, :] - cell.mean_gradients(chi.values))
    q = np.empty((2, 2))
    for i in range(2):
        for j in range(2):
            q[i, j] = cell.area @ np.einsum("mk,mkl,ml->m", cols[i], cell.abar, cols[j])
    return q


def solve_chi0(mesh: Mesh, a: CoefficientTensor, rho: DensityField, tol_zero: float = TOL_ZERO,
               cell: Optional[CellProblem] = None) -> CorrectorField:
    """chi^0: a(chi, v) = int_S rho v dsigma, solvable when M_S(rho) = 0."""
    B = assemble_boundary_mass(mesh, rho, Tag.HOLE)
    load = lumped_boundary_load(B)
    M_S = float(load.sum())
    per = hole_perimeter(mesh)
    if abs(M_S) > tol_zero * per:
        raise HomogError(f"chi0 needs M_S(rho) = 0, got {M_S:.3e}")
    # remove the quadrature-level residual mean so the pinned system is compatible
    ones_B = lumped_boundary_load(assemble_boundary_mass(mesh, DensityField(Field("1")), Tag.HOLE))
    load = load - (M_S / per) * ones_B
    cell = CellProblem(mesh, a) if cell is None else cell
    u = cell.solve(load)
    return CorrectorField("chi0", u, float(u @ cell.mass.sum(axis=0).A1))


def nu_squared(mesh: Mesh, a: CoefficientTensor, chi0: CorrectorField, rho: Optional[DensityField] = None,
               cell: Optional[CellProblem] = None, rtol: float = 1e-8) -> float:
    """nu^2 = a(chi0, chi0); cross-checked against int_S rho chi0 when rho is given."""
    cell = CellProblem(mesh, a) if cell is None else cell
    nu2 = cell.energy(chi0.values, chi0.values)
    if rho is not None:
        B = assemble_boundary_mass(mesh, rho, Tag.HOLE)
        surf = float(lumped_boundary_load(B) @ chi0.values)
        if abs(surf - nu2) > rtol * max(abs(nu2), 1e-300) and abs(surf - nu2) > 1e-14:
            raise HomogError(f"nu^2 cross-check failed: energy {nu2:.12g} vs surface {surf:.12g}")
    return float(nu2)


# ------------------------------------------------------- local Steklov problem


def local_steklov_first_negative(mesh: Mesh, a: CoefficientTensor, rho: DensityField, seed: int = 0,
                                 tol: float = 1e-10) -> LocalSteklovData:
    """First negative eigencouple of the periodic cell Steklov problem, theta > 0, max theta = 1."""
    M_S = surface_average(mesh, rho)
    if not M_S > 0:
        raise HomogError("the first negative local eigencouple is computed for M_S(rho) > 0")
    dof = DofMap.periodic(mesh, mean_zero=False)
    K = reduce(stiffness_from_tensor(mesh, tensor_at_midpoints(mesh, a)), dof)
    Bf = assemble_boundary_mass(mesh, rho, Tag.HOLE)
    B = reduce(Bf, dof)
    try:
        spec = steklov_eigs(K, B, 0, k_neg=1, seed=seed, tol=tol)
    except MissingEigenvalues:
        raise HomogError("local Steklov problem has no negative eigenvalue (rho >= 0 on S?)") from None
    pair = spec.negatives[0]
    theta = dof.expand(pair.vector)
    if theta.sum() < 0:
        theta = -theta
    theta = theta / np.abs(theta).max()
    if theta.min() <= 0:
        raise HomogError(
            f"first negative eigenfunction changes sign (min {theta.min():.3e}); mesh too coarse?"
        )
    integral = float(theta @ (Bf @ theta))
    if not integral < 0:
        raise HomogError(f"int_S rho theta^2 = {integral:.3e} should be negative")
    return LocalSteklovData(pair.eigenvalue, theta, integral)


def theta_weight_midpoints(mesh: Mesh, theta: np.ndarray) -> np.ndarray:
    """(theta_h)^2 at the three edge midpoints of each triangle, theta_h the P1 interpolant."""
    t = theta[mesh.triangles]
    mid = 0.5 * (t + t[:, [1, 2, 0]])
    return mid**2


def tilde_data(mesh: Mesh, a: CoefficientTensor, rho: DensityField, local: LocalSteklovData):
    """Effective data of the factorised problem: a~ = theta^2 a, rho~ = theta^2 rho.

    Returns (q_tilde, M_S(rho~), [chi1~, chi2~]).
    """
    theta = np.asarray(local.theta1_neg, dtype=float)
    w = theta_weight_midpoints(mesh, theta)
    cell = CellProblem(mesh, a, weight=w)
    chis = [solve_corrector(mesh, a, j, weight=w, cell=cell) for j in (1, 2)]
    qt = effective_tensor(mesh, a, chis[0], chis[1], weight=w, cell=cell)
    M_t = float(theta @ (assemble_boundary_mass(mesh, rho, Tag.HOLE) @ theta))
    if not M_t < 0:
        raise HomogError(f"M_S(rho~) = {M_t:.3e} must be negative")
    return qt, M_t, chis


# ------------------------------------------------------------------ driver


def density_changes_sign(mesh: Mesh, rho: DensityField) -> bool:
    """True if rho is negative at some boundary quadrature point (otherwise B >= 0)."""
    pts, _, _ = gauss_points(mesh, mesh.edges_with_tag(Tag.HOLE))
    return bool(np.min(rho(pts[..., 0], pts[..., 1])) < 0)


def homogenize(mesh: Mesh, a: CoefficientTensor, rho: DensityField, tol_zero: float = TOL_ZERO,
               case_override: Optional[str] = None, seed: int = 0, with_negative: bool = True) -> HomogenizedData:
    """All effective data for one cell; M_S < 0 is handled through rho -> -rho."""
    M_S = surface_average(mesh, rho)
    per = hole_perimeter(mesh)
    case = detect_case(M_S, per, tol_zero, case_override)
    sign = -1 if case == "negative" else 1
    rho_w = rho.scaled(-1.0) if sign < 0 else rho
    cell = CellProblem(mesh, a)
    chi = [solve_corrector(mesh, a, j, cell=cell) for j in (1, 2)]
    q = effective_tensor(mesh, a, chi[0], chi[1], cell=cell)
    data = HomogenizedData(q=q, M_S_rho=M_S, case=case, perimeter=per, chi=chi, density_sign=sign,
                           mesh_checksum=mesh.checksum())
    if case == "critical":
        data.chi0 = solve_chi0(mesh, a, rho, tol_zero, cell=cell)
        data.nu_sq = nu_squared(mesh, a, data.chi0, rho, cell=cell)
        if not data.nu_sq > 0:
            raise HomogError("nu^2 must be positive in the critical case (rho vanishes on S?)")
    elif with_negative and density_changes_sign(mesh, rho_w):
        data.local = local_steklov_first_negative(mesh, a, rho_w, seed=seed)
        data.q_tilde, data.M_S_rho_tilde, data.chi_tilde = tilde_data(mesh, a, rho_w, data.local)
    return data
