import json
import shutil

import pytest
import yaml

from steklovhom.cli import main
from steklovhom.study import (
    CSV_COLUMNS, ConfigError, StudyReport, config_from_dict, emit_reports, load_config, make_row, report_csv,
    report_svg, run_study,
)


def base(tmp_path, **over):
    d = {
        "geometry": {"hole_kind": "square", "hole_center": [0.5, 0.5], "hole_size": 0.5, "m": 8},
        "coefficients": "identity",
        "density": "1 + 0.5*sin(2*pi*y1)",
        "levels": [2, 4, 8],
        "k": 1,
        "m_limit": 32,
        "seed": 0,
        "output": str(tmp_path / "out"),
    }
    d.update(over)
    return d


def write_cfg(tmp_path, **over):
    p = tmp_path / "cfg.yaml"
    p.write_text(yaml.safe_dump(base(tmp_path, **over)))
    return p


@pytest.mark.parametrize("over", [
    {"levels": []},
    {"levels": [4, 2]},
    {"k": 0},
    {"m_limit": 7},
    {"case_override": "zero"},
    {"density": "sin(2*pi*"},
    {"density": "y1"},
    {"coefficients": {"a11": "1", "b": "2"}},
    {"coefficients": "no-such-preset"},
    {"colour": "red"},
    {"geometry": {"hole_kind": "square", "hole_center": [0.5, 0.5], "hole_size": 1.2, "m": 8}},
])
def test_config_validation(tmp_path, over):
    with pytest.raises(ConfigError):
        config_from_dict(base(tmp_path, **over))


def test_config_loading_and_hash(tmp_path):
    cfg = load_config(write_cfg(tmp_path))
    assert cfg.k == 1 and cfg.levels == [2, 4, 8]
    other = config_from_dict(base(tmp_path, output="elsewhere"))
    assert other.hash() == cfg.hash()  # output location does not change the numbers
    assert config_from_dict(base(tmp_path, seed=1)).hash() != cfg.hash()
    assert config_from_dict(base(tmp_path, case_override="crit")).case_override == "critical"


def test_single_row_csv_and_json_round_trip(tmp_path):
    rep = StudyReport(config={}, config_hash="0" * 16, seed=1, case="positive",
                      rows=[make_row("positive", 1, "+", 2, 0.5, 1.0, 1.25)])
    lines = report_csv(rep).splitlines()
    assert lines[0] == ",".join(CSV_COLUMNS) and len(lines) == 2
    assert lines[1].split(",")[-2:] == ["0.25", "0.2"]
    back = StudyReport.from_json(json.loads(json.dumps(rep.to_json())))
    assert back.to_json() == rep.to_json()
    with pytest.raises(ValueError):
        StudyReport.from_json({"schema": "other"})


def test_svg_has_one_polyline_per_series():
    rows = [make_row("critical", k, s, n, 1.0, 1.0 + 1 / n, 1.0) for k in (1, 2) for s in "+-" for n in (2, 4)]
    svg = report_svg(StudyReport(config={}, config_hash="", seed=0, case="critical", rows=rows))
    assert svg.count("<polyline") == 4
    assert 'data-series="k=2 sign=-"' in svg


@pytest.fixture(scope="module")
def literal_study(tmp_path_factory):
    tmp = tmp_path_factory.mktemp("lit")
    cfg = config_from_dict(base(tmp))
    return cfg, run_study(cfg, threads=1)


def test_literal_fixture_gap_strictly_decreases(literal_study):
    cfg, rep = literal_study
    assert rep.case == "positive" and rep.complete
    gaps = [r["abs_gap"] for r in rep.rows if r["k"] == 1 and r["sign"] == "+"]
    assert len(gaps) == 3 and gaps[0] > gaps[1] > gaps[2]


def test_sanity_mode_recorded(literal_study):
    _, rep = literal_study
    assert all(lv["note"] == "no negative spectrum" for lv in rep.levels.values())
    assert all(r["sign"] == "+" for r in rep.rows)


def test_determinism_and_cache(tmp_path, literal_study):
    cfg, rep = literal_study
    again = run_study(config_from_dict(base(tmp_path)), threads=2)
    assert report_csv(again) == report_csv(rep)
    shutil.rmtree(tmp_path / "out" / "cache")
    fresh = run_study(config_from_dict(base(tmp_path)), threads=1, cache=False)
    assert fresh.rows == again.rows
    cached = run_study(config_from_dict(base(tmp_path)), threads=1)
    assert report_csv(cached) == report_csv(rep)


def test_emit_reports(tmp_path, literal_study):
    _, rep = literal_study
    paths = emit_reports(rep, ["csv", "json", "svg"], tmp_path / "r")
    assert sorted(p.name for p in paths) == ["study.csv", "study.json", "study.svg"]
    back = StudyReport.from_json(json.loads((tmp_path / "r" / "study.json").read_text()))
    assert back.rows == rep.rows


def test_positive_fixture_rel_gap_monotone(tmp_path):
    cfg = config_from_dict(base(tmp_path, density="0.5 + sin(2*pi*y1)", levels=[2, 4, 8, 16], m_limit=64))
    rep = run_study(cfg)
    for sign in "+-":
        g = [r["rel_gap"] for r in rep.rows if r["k"] == 1 and r["sign"] == sign]
        assert len(g) == 4
        assert all(g[i + 1] <= 1.1 * g[i] for i in range(1, 3))
    lv = rep.levels[8]
    assert set(lv["corrector"]["+"]) == {"u0", "u0+eps*u1"}
    minus = [r for r in rep.rows if r["k"] == 1 and r["sign"] == "-"]
    for r in minus:
        comb = rep.levels[r["n"]]["combination"]["-"][0]
        assert comb / r["epsilon"] == pytest.approx(r["diagnostic"], rel=1e-12)


def test_critical_trend(tmp_path):
    cfg = config_from_dict(base(tmp_path, density="sin(2*pi*y1)", levels=[2, 4, 8]))
    rep = run_study(cfg)
    assert rep.case == "critical"
    plus = [r for r in rep.rows if r["k"] == 1 and r["sign"] == "+"]
    minus = [r for r in rep.rows if r["k"] == 1 and r["sign"] == "-"]
    # sin(2 pi y1) is odd under the reflection y1 -> 1 - y1, so the two sequences mirror each other
    for p, m in zip(plus, minus):
        assert abs(p["lambda_raw"] + m["lambda_raw"]) <= 1e-10 * abs(p["lambda_raw"])
    assert plus[0]["abs_gap"] > plus[-1]["abs_gap"]


def test_cli_exit_codes(tmp_path, capsys):
    cfg = write_cfg(tmp_path, levels=[2])
    assert main(["study", "--config", str(cfg), "--format", "csv"]) == 0
    assert (tmp_path / "out" / "study.csv").exists()
    assert main(["cell", "--config", str(cfg)]) == 0
    assert main(["limit", "--config", str(cfg)]) == 0
    assert main(["eps", "--config", str(cfg), "--level", "2"]) == 0
    assert main(["mesh", "--config", str(cfg), "--level", "2"]) == 0
    assert main(["study", "--config", str(tmp_path / "missing.yaml")]) == 4
    assert main(["study", "--config", str(write_cfg(tmp_path, levels=[]))]) == 2
    assert main(["study", "--config", str(cfg), "--format", "pdf"]) == 2
    assert main(["study", "--config", str(cfg), "--seed", "-1"]) == 2
    crit = write_cfg(tmp_path, density="1", levels=[2])
    assert main(["study", "--config", str(crit), "--case-override", "crit", "--no-cache"]) == 3
    blocked = tmp_path / "blocked"
    blocked.write_text("a file, not a directory")
    assert main(["study", "--config", str(cfg), "--out", str(blocked / "x")]) == 4
