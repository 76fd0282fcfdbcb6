"""Convergence study: cell problems, limit spectra, epsilon sweep, reports."""
from __future__ import annotations

import csv
import hashlib
import io
import json
import logging
import math
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np
import yaml

from .coeff import CoefficientTensor, DensityField, ExprError, Field, tensor_preset
from .geometry import CellGeometry, EpsilonLevel, MeshError, build_cell_mesh, build_square_mesh
from .homog import HomogenizedData, detect_case, homogenize  # noqa: F401  (detect_case re-exported)
from .spectra import (
    build_corrector_expansion, projection_distance, solve_epsilon, solve_limit_negative,
    solve_limit_pencil, solve_limit_positive,
)

log = logging.getLogger(__name__)

REPORT_SCHEMA = "steklovstudy 1"
CSV_COLUMNS = ["case", "k", "sign", "n", "epsilon", "lambda_raw", "diagnostic", "limit", "abs_gap", "rel_gap"]
CASE_ALIASES = {"pos": "positive", "neg": "negative", "crit": "critical",
                "positive": "positive", "negative": "negative", "critical": "critical"}


class ConfigError(ValueError):
    pass


class StudyError(RuntimeError):
    def __init__(self, stage: str, cause: BaseException):
        super().__init__(f"[{stage}] {type(cause).__name__}: {cause}")
        self.stage = stage
        self.cause = cause


# ------------------------------------------------------------------ config


@dataclass
class Tolerances:
    tol_zero: float = 1e-10
    eig: float = 1e-8
    cg: float = 1e-12


@dataclass
class StudyConfig:
    geometry: CellGeometry = field(default_factory=CellGeometry)
    coefficients: dict = field(default_factory=lambda: {"a11": "1", "a12": "0", "a22": "1"})
    density: str = "1"
    levels: list = field(default_factory=lambda: [2, 4, 8, 16])
    k: int = 3
    m_limit: int = 64
    tolerances: Tolerances = field(default_factory=Tolerances)
    output: str = "study-out"
    case_override: Optional[str] = None
    seed: Optional[int] = None
    max_dofs: int = 200_000

    # -- derived objects
    def tensor(self) -> CoefficientTensor:
        c = self.coefficients
        return CoefficientTensor.from_strings(c["a11"], c.get("a12", "0"), c.get("a22", c["a11"]))

    def rho(self) -> DensityField:
        return DensityField(Field(self.density))

    def canonical(self) -> dict:
        """Everything that influences the numbers (not the output location)."""
        return {
            "geometry": self.geometry.to_dict(),
            "coefficients": dict(sorted(self.coefficients.items())),
            "density": self.density,
            "levels": list(self.levels),
            "k": self.k,
            "m_limit": self.m_limit,
            "tolerances": asdict(self.tolerances),
            "case_override": self.case_override,
            "seed": self.seed,
            "max_dofs": self.max_dofs,
        }

    def hash(self) -> str:
        blob = json.dumps(self.canonical(), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()[:16]

    def solver_seed(self) -> int:
        return int(self.seed) if self.seed is not None else int(self.hash()[:8], 16)

    def validate(self) -> "StudyConfig":
        try:
            self.geometry.validate()
        except MeshError as e:
            raise ConfigError(f"geometry: {e}") from None
        if not self.levels:
            raise ConfigError("levels must be a non-empty list of positive integers")
        if any(not isinstance(n, int) or n < 1 for n in self.levels):
            raise ConfigError(f"levels must be positive integers, got {self.levels}")
        if list(self.levels) != sorted(set(self.levels)):
            raise ConfigError(f"levels must be strictly ascending, got {self.levels}")
        if not isinstance(self.k, int) or self.k < 1:
            raise ConfigError("k must be a positive integer")
        if self.m_limit < 2 or self.m_limit % 2:
            raise ConfigError("m_limit must be an even integer >= 2")
        if self.case_override is not None and self.case_override not in CASE_ALIASES:
            raise ConfigError(f"case_override must be one of pos, neg, crit, got {self.case_override!r}")
        if self.case_override is not None:
            self.case_override = CASE_ALIASES[self.case_override]
        try:
            a = self.tensor()
            rho = self.rho()
        except ExprError as e:
            raise ConfigError(f"expression: {e}") from None
        except KeyError as e:
            raise ConfigError(f"coefficients: missing entry {e}") from None
        for name, f in (("a11", a.a11), ("a12", a.a12), ("a22", a.a22), ("density", rho.rho)):
            try:
                ok = f.is_periodic()
            except ExprError as e:
                raise ConfigError(f"{name}: {e}") from None
            if not ok:
                raise ConfigError(f"{name} = {f.source!r} is not 1-periodic in y1 and y2")
        try:
            a.check_elliptic()
        except ExprError as e:
            raise ConfigError(str(e)) from None
        return self


def _tensor_entries(spec) -> dict:
    if isinstance(spec, str):
        try:
            t = tensor_preset(spec)
        except KeyError as e:
            raise ConfigError(str(e)) from None
        return {k: v for k, v in t.sources().items()}
    if isinstance(spec, dict):
        if "preset" in spec:
            return _tensor_entries(spec["preset"])
        out = {k: str(v) for k, v in spec.items() if k in ("a11", "a12", "a22")}
        unknown = set(spec) - {"a11", "a12", "a22"}
        if unknown:
            raise ConfigError(f"unknown coefficient keys {sorted(unknown)}")
        if "a11" not in out:
            raise ConfigError("coefficients need at least a11")
        return out
    raise ConfigError("coefficients must be a preset name or a mapping of a11/a12/a22")


def config_from_dict(d: dict) -> StudyConfig:
    if not isinstance(d, dict):
        raise ConfigError("config must be a mapping")
    known = {"geometry", "coefficients", "density", "levels", "k", "m_limit", "tolerances", "output",
             "case_override", "seed", "max_dofs"}
    unknown = set(d) - known
    if unknown:
        raise ConfigError(f"unknown config keys {sorted(unknown)}")
    cfg = StudyConfig()
    g = d.get("geometry") or {}
    try:
        cfg.geometry = CellGeometry(
            hole_kind=str(g.get("hole_kind", "square")),
            hole_center=tuple(float(x) for x in g.get("hole_center", (0.5, 0.5))),
            hole_size=float(g.get("hole_size", 0.5)),
            m=int(g.get("m", 8)),
        )
    except (TypeError, ValueError) as e:
        raise ConfigError(f"geometry: {e}") from None
    if "coefficients" in d:
        cfg.coefficients = _tensor_entries(d["coefficients"])
    if "density" in d:
        cfg.density = str(d["density"])
    for key in ("levels", "k", "m_limit", "seed", "max_dofs", "case_override", "output"):
        if key in d and d[key] is not None:
            setattr(cfg, key, d[key])
    tol = d.get("tolerances") or {}
    try:
        cfg.tolerances = Tolerances(**{k: float(v) for k, v in tol.items()})
    except TypeError as e:
        raise ConfigError(f"tolerances: {e}") from None
    return cfg.validate()


def load_config(path) -> StudyConfig:
    text = Path(path).read_text()
    try:
        data = yaml.safe_load(text)
    except yaml.YAMLError as e:
        raise ConfigError(f"cannot parse {path}: {e}") from None
    return config_from_dict(data or {})


# ------------------------------------------------------------------ report


@dataclass
class StudyReport:
    config: dict
    config_hash: str
    seed: int
    case: str
    rows: list = field(default_factory=list)
    effective: dict = field(default_factory=dict)
    limits: dict = field(default_factory=dict)
    levels: dict = field(default_factory=dict)  # n -> per-level provenance and diagnostics
    complete: bool = True
    error: Optional[str] = None

    def to_json(self) -> dict:
        return {
            "schema": REPORT_SCHEMA,
            "config": self.config,
            "config_hash": self.config_hash,
            "seed": self.seed,
            "case": self.case,
            "complete": self.complete,
            "error": self.error,
            "effective": self.effective,
            "limits": self.limits,
            "levels": {str(n): v for n, v in sorted(self.levels.items())},
            "rows": self.rows,
        }

    @classmethod
    def from_json(cls, d: dict) -> "StudyReport":
        if d.get("schema") != REPORT_SCHEMA:
            raise ValueError(f"expected schema {REPORT_SCHEMA!r}")
        return cls(
            config=d["config"], config_hash=d["config_hash"], seed=d["seed"], case=d["case"],
            rows=d["rows"], effective=d["effective"], limits=d["limits"],
            levels={int(n): v for n, v in d["levels"].items()}, complete=d["complete"], error=d["error"],
        )


def make_row(case: str, k: int, sign: str, n: int, lam: float, diagnostic: float, limit: float) -> dict:
    gap = abs(diagnostic - limit)
    return {
        "case": case, "k": k, "sign": sign, "n": n, "epsilon": 1.0 / n, "lambda_raw": lam,
        "diagnostic": diagnostic, "limit": limit, "abs_gap": gap,
        "rel_gap": gap / abs(limit) if limit != 0 else math.inf,
    }


def diagnostic_value(case: str, sign: str, lam: float, eps: float, density_sign: int,
                     lambda1_neg: Optional[float]) -> float:
    """Scaled epsilon eigenvalue that should approach the limit value.

    positive / negative: the sequence of sign ``density_sign`` is lambda/eps; the
    other one is (lambda - s lambda1^-/eps)/eps with s = density_sign.
    critical: lambda itself.
    """
    if case == "critical":
        return lam
    main = "+" if density_sign > 0 else "-"
    if sign == main:
        return lam / eps
    return (lam - density_sign * lambda1_neg / eps) / eps


# ------------------------------------------------------------------ pipeline


def _cache_dir(cfg: StudyConfig) -> Path:
    return Path(cfg.output) / "cache" / cfg.hash()


def _write_json(path: Path, obj) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_suffix(path.suffix + ".tmp")
    tmp.write_text(json.dumps(obj, sort_keys=True))
    os.replace(tmp, path)


def run_homogenization(cfg: StudyConfig, cache: bool = True):
    cell = build_cell_mesh(cfg.geometry)
    path = _cache_dir(cfg) / "homog.json"
    if cache and path.exists():
        data = HomogenizedData.from_json(json.loads(path.read_text()))
        if data.mesh_checksum == cell.checksum():
            return cell, data
        log.warning("cached effective data belong to another mesh; recomputing")
    data = homogenize(cell, cfg.tensor(), cfg.rho(), cfg.tolerances.tol_zero, cfg.case_override,
                      seed=cfg.solver_seed())
    if cfg.case_override is not None:
        natural = detect_case(data.M_S_rho, data.perimeter, cfg.tolerances.tol_zero)
        if natural != cfg.case_override:
            log.warning("case override %s differs from the detected case %s", cfg.case_override, natural)
    if cache:
        _write_json(path, data.to_json())
    return cell, data


def run_limits(cfg: StudyConfig, data: HomogenizedData) -> dict:
    """Limit spectra keyed by sign of the epsilon sequence they describe."""
    omega = build_square_mesh(cfg.m_limit)
    k, seed = cfg.k, cfg.solver_seed()
    if data.case == "critical":
        pencil = solve_limit_pencil(data.q, data.nu_sq, omega, k, seed=seed)
        return {"+": pencil, "-": pencil}
    s = data.density_sign
    main, other = ("+", "-") if s > 0 else ("-", "+")
    out = {main: solve_limit_positive(data.q, s * data.M_S_rho, omega, k, seed=seed)}
    if data.local is not None:
        out[other] = solve_limit_negative(data.q_tilde, data.M_S_rho_tilde, omega, k, seed=seed)
    return out


def limit_values(case: str, limits: dict, sign: str, density_sign: int) -> np.ndarray:
    """Limit targets in the sign convention of the original density."""
    lim = limits[sign]
    if case == "critical":
        return lim.values(sign)
    vals = lim.values("+") if lim.case == "positive" else lim.values("-")
    return density_sign * vals


def run_level(cfg: StudyConfig, n: int, cell, data: HomogenizedData, limits: dict, cache: bool = True) -> dict:
    """Solve one epsilon level; returns a JSON-ready summary (cached by level)."""
    path = _cache_dir(cfg) / f"eps_{n}.json"
    if cache and path.exists():
        return json.loads(path.read_text())
    lvl = EpsilonLevel(n)
    spec = solve_epsilon(cfg.geometry, lvl, cfg.tensor(), cfg.rho(), cfg.k, case=data.case, cell=cell,
                         tol=cfg.tolerances.eig, seed=cfg.solver_seed(), max_dofs=cfg.max_dofs,
                         sanity=data.case != "critical" and data.local is None)
    corr = {}
    for sign, pairs in (("+", spec.slice.positives), ("-", spec.slice.negatives)):
        if sign not in limits or not pairs:
            continue
        ex_sign = sign if data.case == "critical" else None
        ex = build_corrector_expansion(limits[sign], data, 1, cell, ex_sign)
        u = pairs[0].vector
        x = spec.mesh.nodes
        corr[sign] = {
            "u0": projection_distance(u, ex.leading(x, lvl.eps)),
            "u0+eps*u1": projection_distance(u, ex(x, lvl.eps)),
        }
    summary = {
        "n": n,
        "epsilon": lvl.eps,
        "mesh_checksum": spec.mesh.checksum(),
        "n_nodes": spec.mesh.n_nodes,
        "normalization": spec.normalization,
        "values": {"+": spec.values("+").tolist(), "-": spec.values("-").tolist()},
        "residuals": {"+": [p.residual_norm for p in spec.slice.positives],
                      "-": [p.residual_norm for p in spec.slice.negatives]},
        "norm_residuals": spec.norm_residuals,
        "shifts": {k: float(v) for k, v in spec.slice.shifts.items()},
        "corrector": corr,
        "note": spec.note,
    }
    if data.local is not None:
        # the other-sign sequence before division by eps; behaves like eps * xi_0^k
        other = "-" if data.density_sign > 0 else "+"
        shift = data.density_sign * data.local.lambda1_neg / lvl.eps
        summary["combination"] = {other: [lam - shift for lam in summary["values"][other]]}
    if cache:
        _write_json(path, summary)
    return summary


def _rows_for_level(cfg: StudyConfig, data: HomogenizedData, limits: dict, summary: dict) -> list:
    rows = []
    eps = summary["epsilon"]
    lam1 = data.local.lambda1_neg if data.local is not None else None
    for sign in ("+", "-"):
        if sign not in limits:
            continue
        target = limit_values(data.case, limits, sign, data.density_sign)
        for k, lam in enumerate(summary["values"][sign][: cfg.k], start=1):
            diag = diagnostic_value(data.case, sign, lam, eps, data.density_sign, lam1)
            rows.append(make_row(data.case, k, sign, summary["n"], lam, diag, float(target[k - 1])))
    return rows


def run_study(cfg: StudyConfig, threads: Optional[int] = None, cache: bool = True) -> StudyReport:
    report = StudyReport(config=cfg.canonical(), config_hash=cfg.hash(), seed=cfg.solver_seed(), case="")
    try:
        cell, data = run_homogenization(cfg, cache)
    except Exception as e:  # noqa: BLE001 - tagged and re-raised
        raise StudyError("cell", e) from e
    report.case = data.case
    report.effective = {
        "M_S_rho": data.M_S_rho, "perimeter": data.perimeter, "density_sign": data.density_sign,
        "q": data.q.to_list(), "nu_sq": data.nu_sq,
        "lambda1_neg": data.local.lambda1_neg if data.local else None,
        "surface_integral_rho_theta_sq": data.local.surface_integral_rho_theta_sq if data.local else None,
        "theta_min": float(np.min(data.local.theta1_neg)) if data.local else None,
        "q_tilde": data.q_tilde.to_list() if data.q_tilde else None,
        "M_S_rho_tilde": data.M_S_rho_tilde,
        "cell_mesh_checksum": data.mesh_checksum,
    }
    try:
        limits = run_limits(cfg, data)
    except Exception as e:  # noqa: BLE001
        raise StudyError("limit", e) from e
    report.limits = {
        sign: {"case": lim.case, "values": limit_values(data.case, limits, sign, data.density_sign).tolist(),
               "norm_residuals": lim.norm_residuals}
        for sign, lim in limits.items()
    }
    width = threads or os.cpu_count() or 1
    failure = None
    with ThreadPoolExecutor(max_workers=max(1, min(width, len(cfg.levels)))) as pool:
        futures = {n: pool.submit(run_level, cfg, n, cell, data, limits, cache) for n in cfg.levels}
        for n in cfg.levels:
            try:
                report.levels[n] = futures[n].result()
            except Exception as e:  # noqa: BLE001
                failure = failure or StudyError(f"eps n={n}", e)
    for n in cfg.levels:
        if n in report.levels:
            report.rows.extend(_rows_for_level(cfg, data, limits, report.levels[n]))
    if failure is not None:
        report.complete = False
        report.error = str(failure)
        failure.report = report
        raise failure
    return report


# ----------------------------------------------------------------- outputs


def format_float(x: float) -> str:
    return repr(float(x))


def report_csv(report: StudyReport) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(CSV_COLUMNS)
    for r in report.rows:
        w.writerow([r[c] if c in ("case", "k", "sign", "n") else format_float(r[c]) for c in CSV_COLUMNS])
    return buf.getvalue()


def report_svg(report: StudyReport, width: int = 640, height: int = 480) -> str:
    """Log-log plot of rel_gap against epsilon, one polyline per (k, sign) series."""
    series = {}
    for r in report.rows:
        series.setdefault((r["k"], r["sign"]), []).append((r["epsilon"], r["rel_gap"]))
    pts = [(e, g) for s in series.values() for e, g in s if e > 0 and 0 < g < math.inf]
    margin = 60
    if pts:
        lx = [math.log10(e) for e, _ in pts]
        ly = [math.log10(g) for _, g in pts]
        x0, x1 = min(lx), max(lx)
        y0, y1 = min(ly), max(ly)
    else:
        x0 = y0 = 0.0
        x1 = y1 = 1.0
    x1 = x1 if x1 > x0 else x0 + 1
    y1 = y1 if y1 > y0 else y0 + 1

    def sx(e):
        return margin + (math.log10(e) - x0) / (x1 - x0) * (width - 2 * margin)

    def sy(g):
        return height - margin - (math.log10(g) - y0) / (y1 - y0) * (height - 2 * margin)

    colors = ["#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b", "#e377c2", "#17becf"]
    out = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" viewBox="0 0 {width} {height}">',
        f'<rect x="0" y="0" width="{width}" height="{height}" fill="white"/>',
        f'<line x1="{margin}" y1="{height - margin}" x2="{width - margin}" y2="{height - margin}" stroke="black"/>',
        f'<line x1="{margin}" y1="{margin}" x2="{margin}" y2="{height - margin}" stroke="black"/>',
        f'<text x="{width / 2:.0f}" y="{height - 15}" text-anchor="middle" font-size="13">epsilon (log)</text>',
        f'<text x="18" y="{height / 2:.0f}" text-anchor="middle" font-size="13" '
        f'transform="rotate(-90 18 {height / 2:.0f})">relative gap (log)</text>',
        f'<text x="{width / 2:.0f}" y="25" text-anchor="middle" font-size="14">case: {report.case}</text>',
    ]
    for i, ((k, sign), s) in enumerate(sorted(series.items())):
        good = sorted((e, g) for e, g in s if e > 0 and 0 < g < math.inf)
        coords = " ".join(f"{sx(e):.2f},{sy(g):.2f}" for e, g in good)
        color = colors[i % len(colors)]
        out.append(f'<polyline data-series="k={k} sign={sign}" fill="none" stroke="{color}" '
                   f'stroke-width="2" points="{coords}"/>')
        out.append(f'<text x="{width - margin + 4}" y="{margin + 16 * i}" font-size="12" fill="{color}">'
                   f'k={k} {sign}</text>')
    out.append("</svg>")
    return "\n".join(out) + "\n"


def emit_reports(report: StudyReport, formats, out_dir) -> list:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    written = []
    for fmt in formats:
        if fmt == "csv":
            p = out / "study.csv"
            p.write_text(report_csv(report))
        elif fmt == "json":
            p = out / "study.json"
            p.write_text(json.dumps(report.to_json(), indent=1, sort_keys=True, allow_nan=True))
        elif fmt == "svg":
            p = out / "study.svg"
            p.write_text(report_svg(report))
        else:
            raise ValueError(f"unknown report format {fmt!r}")
        written.append(p)
    return written
