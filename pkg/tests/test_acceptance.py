"""Acceptance criteria, one test each.

Every test prints a single ``criterion N: PASS|FAIL ...`` line, bypassing
output capture, and then asserts the same condition.
"""
import math
import time
from pathlib import Path

import numpy as np
import pytest

from steklovhom.coeff import CoefficientTensor, DensityField, Field, tensor_preset
from steklovhom.eigen import steklov_eigs
from steklovhom.fem import assemble_boundary_mass, assemble_stiffness
from steklovhom.geometry import CellGeometry, EpsilonLevel, Tag, build_cell_mesh, build_disk_mesh, build_square_mesh, mirror_mesh
from steklovhom.homog import CellProblem, EffectiveTensor, effective_tensor, solve_corrector
from steklovhom.spectra import solve_epsilon, solve_limit_positive
from steklovhom.study import emit_reports, load_config, run_study

CONFIGS = Path(__file__).resolve().parent.parent / "configs"
ID = tensor_preset("identity")
SQUARE8 = CellGeometry("square", (0.5, 0.5), 0.5, 8)


@pytest.fixture
def verdict(capsys):
    def emit(n, ok, detail, seconds=None):
        t = f" [{seconds:.2f} s]" if seconds is not None else ""
        line = f"criterion {n}: {'PASS' if ok else 'FAIL'} {detail}{t}"
        with capsys.disabled():
            print("\n" + line)
        assert ok, line
    return emit



def _study(name, tmp, **over):
    cfg = load_config(CONFIGS / name)
    cfg.output = str(tmp)
    for k, v in over.items():
        setattr(cfg, k, v)
    cfg.validate()
    t0 = time.perf_counter()
    rep = run_study(cfg, cache=False)
    return rep, time.perf_counter() - t0


@pytest.fixture(scope="module")
def positive(tmp_path_factory):
    return _study("positive.yaml", tmp_path_factory.mktemp("pos"))


@pytest.fixture(scope="module")
def critical(tmp_path_factory):
    return _study("critical.yaml", tmp_path_factory.mktemp("crit"))


def _series(rep, sign, k=1):
    return [r for r in rep.rows if r["k"] == k and r["sign"] == sign]


def test_criterion_1_disk_steklov(verdict):
    t0 = time.perf_counter()
    mesh = build_disk_mesh(1.0, rings=40)
    A = assemble_stiffness(mesh, ID)
    B = assemble_boundary_mass(mesh, DensityField(Field("1")), Tag.HOLE)
    lam = steklov_eigs(A, B, 5, k_neg=0).values("+")
    dt = time.perf_counter() - t0
    err = np.max(np.abs(lam - [1, 1, 2, 2, 3]) / [1, 1, 2, 2, 3])
    verdict(1, err <= 0.02 and dt < 30, f"{mesh.n_nodes} dofs, max rel err {err:.4f} (<= 0.02)", dt)


def test_criterion_2_square_dirichlet(verdict):
    t0 = time.perf_counter()
    lam = solve_limit_positive(EffectiveTensor(1.0, 0.0, 1.0), 1.0, build_square_mesh(64), 3).values("+")
    dt = time.perf_counter() - t0
    ref = math.pi**2 * np.array([2, 5, 5])
    err = np.max(np.abs(lam - ref) / ref)
    verdict(2, err <= 0.01 and dt < 30, f"max rel err {err:.5f} (<= 0.01)", dt)


def _q(mesh, a):
    cell = CellProblem(mesh, a)
    chi = [solve_corrector(mesh, a, j, cell=cell) for j in (1, 2)]
    return effective_tensor(mesh, a, chi[0], chi[1], cell=cell), chi


def test_criterion_3_effective_tensor(verdict):
    t0 = time.perf_counter()
    mesh = build_cell_mesh(CellGeometry("square", (0.5, 0.5), 0.5, 32))
    q, _ = _q(mesh, ID)
    q2, _ = _q(mesh, CoefficientTensor.isotropic("2"))
    q0, _ = _q(build_cell_mesh(CellGeometry("none", m=32)), ID)
    dt = time.perf_counter() - t0
    checks = {
        "pd": q.min_eigenvalue() > 0,
        "isotropic": abs(q.q11 - q.q22) <= 1e-8 and abs(q.q12) <= 1e-8,
        "bounds": 0 < q.q11 < 0.75,
        "no-hole": np.abs(q0.matrix() - np.eye(2)).max() <= 1e-12,
        "doubling": np.abs(q2.matrix() - 2 * q.matrix()).max() <= 1e-12,
    }
    bad = [k for k, v in checks.items() if not v]
    verdict(3, not bad and dt < 60, f"q11={q.q11:.6f}, failed checks: {bad or 'none'}", dt)


def test_criterion_4_two_sequences(verdict, positive):
    rep, dt = positive
    worst, counts = 0.0, []
    for n, lv in sorted(rep.levels.items()):
        counts.append((len(lv["values"]["+"]), len(lv["values"]["-"])))
        worst = max([worst] + lv["norm_residuals"]["+"] + lv["norm_residuals"]["-"])
        assert all(v > 0 for v in lv["values"]["+"]) and all(v < 0 for v in lv["values"]["-"])
    ok = all(p >= 3 and m >= 3 for p, m in counts) and worst <= 1e-8
    verdict(4, ok, f"(+,-) counts per level {counts}, worst normalization residual {worst:.2e}")


def test_criterion_5_positive_convergence(verdict, positive, tmp_path):
    rep, dt = positive
    gaps = [r["rel_gap"] for r in _series(rep, "+")]
    lit, dt2 = _study("positive.yaml", tmp_path, density="1 + 0.5*sin(2*pi*y1)", k=1)
    lgaps = [r["rel_gap"] for r in _series(lit, "+")]
    ok = all(all(np.diff(g) < 0) and g[-1] <= 0.10 and len(g) == 4 for g in (gaps, lgaps))
    verdict(5, ok and dt + dt2 < 600,
            "rel gaps " + ", ".join(f"{g:.4f}" for g in gaps) + " (0.5+sin); "
            + ", ".join(f"{g:.4f}" for g in lgaps) + " (1+0.5 sin)", dt + dt2)


def test_criterion_6_factorization(verdict, positive):
    rep, _ = positive
    eff = rep.effective
    gaps = [r["rel_gap"] for r in _series(rep, "-")]
    ok = (eff["lambda1_neg"] < 0 and eff["theta_min"] > 0 and eff["surface_integral_rho_theta_sq"] < 0
          and gaps[-1] <= 0.20)
    verdict(6, ok, f"lambda1-={eff['lambda1_neg']:.4f}, min theta={eff['theta_min']:.3f}, "
                   f"int rho theta^2={eff['surface_integral_rho_theta_sq']:.4f}, gap at n=16 {gaps[-1]:.4f} (<= 0.20)")


def test_criterion_7_critical(verdict, critical):
    rep, dt = critical
    eff = rep.effective
    gap = _series(rep, "+")[-1]["rel_gap"]
    plus, minus = np.array(rep.limits["+"]["values"]), np.array(rep.limits["-"]["values"])
    res = max(rep.limits["+"]["norm_residuals"]["+"] + rep.limits["-"]["norm_residuals"]["-"])
    ok = rep.case == "critical" and eff["nu_sq"] > 0 and gap <= 0.10 and np.array_equal(plus, -minus) and res <= 1e-8
    verdict(7, ok, f"case={rep.case}, nu^2={eff['nu_sq']:.4f}, gap at n=16 {gap:.4f}, "
                   f"limit +/- exact mirror={np.array_equal(plus, -minus)}, norm residual {res:.1e}", dt)


def test_criterion_8_corrector(verdict, positive, critical):
    parts = []
    ok = True
    for name, (rep, _) in (("positive", positive), ("critical", critical)):
        c = rep.levels[8]["corrector"]["+"]
        ok &= c["u0+eps*u1"] < c["u0"]
        parts.append(f"{name} {c['u0']:.4f} -> {c['u0+eps*u1']:.4f}")
    verdict(8, ok, "distance u0 -> u0+eps*u1 at n=8: " + "; ".join(parts))


def test_criterion_9_metamorphic(verdict):
    a = ID
    rho = DensityField(Field("0.5 + sin(2*pi*y1)"))
    base = solve_epsilon(SQUARE8, EpsilonLevel(4), a, rho, 3)
    s3 = solve_epsilon(SQUARE8, EpsilonLevel(4), a, rho.scaled(3.0), 3)
    scale = max(np.max(np.abs(3 * s3.values(s) - base.values(s)) / np.abs(base.values(s))) for s in "+-")
    neg = solve_epsilon(SQUARE8, EpsilonLevel(4), a, rho.scaled(-1.0), 3, case="negative")
    swap = np.array_equal(neg.values("+"), -base.values("-")) and np.array_equal(neg.values("-"), -base.values("+"))
    mesh = build_cell_mesh(CellGeometry("square", (0.5, 0.5), 0.5, 16))
    ta = CoefficientTensor(Field("2 + sin(2*pi*y1) + 0.3*cos(2*pi*y2)"), Field("0.4*sin(2*pi*(y1 + 2*y2))"),
                           Field("1.5 + 0.5*cos(2*pi*(y1 - y2))"))
    tb = CoefficientTensor(Field("2 + sin(2*pi*(1 - y1)) + 0.3*cos(2*pi*y2)"),
                           Field("-0.4*sin(2*pi*((1 - y1) + 2*y2))"),
                           Field("1.5 + 0.5*cos(2*pi*((1 - y1) - y2))"))
    _, ca = _q(mesh, ta)
    _, cb = _q(mirror_mesh(mesh, 0), tb)
    mirr = max(np.abs(cb[0].values + ca[0].values).max(), np.abs(cb[1].values - ca[1].values).max())
    ok = scale <= 1e-10 and swap and mirr <= 1e-8
    verdict(9, ok, f"scaling err {scale:.1e}, exact swap {swap}, mirror err {mirr:.1e}")


def test_criterion_10_determinism(verdict, tmp_path):
    cfg = load_config(CONFIGS / "positive.yaml")
    csvs = []
    for run in ("a", "b"):
        cfg.output = str(tmp_path / run)
        rep = run_study(cfg, cache=False)
        emit_reports(rep, ["csv"], cfg.output)
        csvs.append((tmp_path / run / "study.csv").read_bytes())
    verdict(10, csvs[0] == csvs[1], f"two fresh runs, {len(csvs[0])} bytes each, identical={csvs[0] == csvs[1]}")
