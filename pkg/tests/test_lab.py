import json
import os

import numpy as np
import pytest

from heatflow.cli import main as cli_main
from heatflow.errors import ConfigurationError, UsageError
from heatflow.lab import (load_config, read_snapshot, run_scenario,
                          validate_config, verify_suite, write_snapshot)
from heatflow.mesh import Field, build_disk_mesh, load_mesh


MINIMAL = {
    "target": {"kind": "sphere", "n": 3},
    "boundary": {"family": "cap", "delta": 0.2},
    "refinement": 3,
    "t_end": 10.0,
}

SMALL_FAST = {
    "target": {"kind": "sphere", "n": 3},
    "boundary": {"family": "cap", "delta": 0.12},
    "refinement": 1,
    "t_end": 2.0,
    "checks": ["convexity", "ut_monotone", "decay_identity", "cross_term",
               "cauchy"],
    "seed": 7,
    "snapshots": 9,
}


def test_minimal_config_gets_defaults():
    cfg = validate_config(dict(MINIMAL))
    assert cfg.eps0 == 0.1
    assert cfg.checks == ("convexity", "ut_monotone", "decay_identity",
                          "cross_term", "gauge", "hardy", "cauchy")
    assert cfg.timestep == {"factor": 4.0}
    assert cfg.seed == 20260809


def test_config_rejects_bad_eps0():
    raw = dict(MINIMAL, eps0=-1.0)
    with pytest.raises(ConfigurationError, match="eps0"):
        validate_config(raw)


def test_config_rejects_unknown_keys():
    with pytest.raises(ConfigurationError, match="epsilon0_typo"):
        validate_config(dict(MINIMAL, epsilon0_typo=0.1))
    with pytest.raises(ConfigurationError, match="radius"):
        validate_config(dict(MINIMAL, target={"kind": "sphere", "radius": 2}))
    with pytest.raises(ConfigurationError, match="width"):
        validate_config(dict(MINIMAL,
                             boundary={"family": "cap", "delta": 0.1,
                                       "width": 2}))
    with pytest.raises(ConfigurationError, match="dt"):
        validate_config(dict(MINIMAL, timestep={"dt": 0.1}))
    with pytest.raises(ConfigurationError, match="t_end"):
        validate_config(dict(MINIMAL, t_end=0.5))
    with pytest.raises(ConfigurationError):
        validate_config(dict(MINIMAL, checks=["convexity", "bogus"]))


def test_config_parse_error_mentions_line(tmp_path):
    p = tmp_path / "bad.json"
    p.write_text('{\n  "target": [,]\n}\n')
    with pytest.raises(ConfigurationError, match="line 2"):
        load_config(p)


def test_env_seed_override(tmp_path, monkeypatch):
    p = tmp_path / "cfg.json"
    p.write_text(json.dumps(dict(MINIMAL, seed=1)))
    monkeypatch.setenv("HEATFLOW_SEED", "4321")
    assert load_config(p).seed == 4321
    monkeypatch.delenv("HEATFLOW_SEED")
    assert load_config(p).seed == 1


def test_run_scenario_smoke(tmp_path):
    cfg = validate_config(dict(SMALL_FAST))
    report = run_scenario(cfg, out_dir=tmp_path / "out")
    assert report["scenario"]["feasible"]
    assert set(report["checks"]) == set(SMALL_FAST["checks"])
    for name, res in report["checks"].items():
        assert res["verdict"] in ("pass", "fail", "skipped")
        assert res["verdict"] == "pass", name
    assert (tmp_path / "out" / "report.json").exists()
    assert (tmp_path / "out" / "trajectory.csv").exists()
    csv = (tmp_path / "out" / "trajectory.csv").read_text().splitlines()
    assert csv[0] == "t,E_raw,ut_L2_sq,tension_L2"
    assert len(csv) == report["trajectory"]["steps"] + 2


def test_run_scenario_deterministic(tmp_path):
    cfg = validate_config(dict(SMALL_FAST))
    run_scenario(cfg, out_dir=tmp_path / "a")
    run_scenario(cfg, out_dir=tmp_path / "b")
    ra = (tmp_path / "a" / "report.json").read_bytes()
    rb = (tmp_path / "b" / "report.json").read_bytes()
    assert ra == rb
    ca = (tmp_path / "a" / "trajectory.csv").read_bytes()
    cb = (tmp_path / "b" / "trajectory.csv").read_bytes()
    assert ca == cb


def test_infeasible_cap_radius(tmp_path):
    cfg = validate_config(dict(SMALL_FAST,
                               boundary={"family": "cap", "delta": 1.5}))
    report = run_scenario(cfg, out_dir=tmp_path / "out")
    assert report["scenario"]["feasible"] is False
    assert "delta" in report["scenario"]["reason"]
    for res in report["checks"].values():
        assert res["verdict"] == "skipped"


def test_fourier_boundary_runs():
    cfg = validate_config({
        "target": {"kind": "sphere", "n": 3},
        "boundary": {"family": "fourier",
                     "coeffs": [[0.05, 0.0, 0.0, 0.04], [0.01, 0.02, 0.0, 0.0]]},
        "refinement": 1,
        "t_end": 1.5,
        "checks": ["convexity", "ut_monotone"],
        "snapshots": 7,
    })
    report = run_scenario(cfg)
    assert report["scenario"]["feasible"]
    assert report["scenario"]["energy_initial"] < 0.1


def test_report_completeness_and_finiteness(tmp_path):
    cfg = validate_config(dict(SMALL_FAST))
    report = run_scenario(cfg)
    # every requested check appears exactly once, nothing else
    assert sorted(report["checks"]) == sorted(SMALL_FAST["checks"])

    def walk(o):
        if isinstance(o, dict):
            for v in o.values():
                walk(v)
        elif isinstance(o, list):
            for v in o:
                walk(v)
        elif isinstance(o, float):
            assert np.isfinite(o)
    walk(report)


def test_verify_suite(tmp_path):
    cfgdir = tmp_path / "suite"
    cfgdir.mkdir()
    (cfgdir / "a.json").write_text(json.dumps(SMALL_FAST))
    (cfgdir / "b.json").write_text(json.dumps(
        dict(SMALL_FAST, seed=8, boundary={"family": "cap", "delta": 0.1})))
    aggregate, code = verify_suite(cfgdir, out_dir=tmp_path / "reports")
    assert code == 0
    assert aggregate["all_pass"]
    assert sorted(aggregate["scenarios"]) == ["a", "b"]


def test_verify_suite_parallel_matches_serial(tmp_path):
    cfgdir = tmp_path / "suite"
    cfgdir.mkdir()
    (cfgdir / "a.json").write_text(json.dumps(SMALL_FAST))
    (cfgdir / "b.json").write_text(json.dumps(dict(SMALL_FAST, seed=9)))
    serial, code1 = verify_suite(cfgdir)
    parallel, code2 = verify_suite(cfgdir, jobs=2)
    assert code1 == code2 == 0
    assert serial == parallel


def test_verify_suite_flags_failure(tmp_path):
    cfgdir = tmp_path / "suite"
    cfgdir.mkdir()
    (cfgdir / "good.json").write_text(json.dumps(SMALL_FAST))
    (cfgdir / "bad.json").write_text(json.dumps(
        dict(SMALL_FAST, boundary={"family": "cap", "delta": 1.5})))
    aggregate, code = verify_suite(cfgdir)
    assert code == 1
    assert any("bad" in f for f in aggregate["failures"])


def test_verify_suite_empty_dir(tmp_path):
    with pytest.raises(UsageError):
        verify_suite(tmp_path)


def test_snapshot_roundtrip(tmp_path, mesh2):
    rng = np.random.default_rng(0)
    f = Field(mesh2, rng.standard_normal((mesh2.n_vertices, 3)))
    path = tmp_path / "snap.u.txt"
    write_snapshot(f, 1.25, path)
    t, back = read_snapshot(mesh2, path)
    assert t == 1.25
    assert np.array_equal(back.values, f.values)


def test_cli_mesh_and_run(tmp_path, capsys):
    rc = cli_main(["mesh", "--refinement", "1", "--out",
                   str(tmp_path / "m.txt")])
    assert rc == 0
    m = load_mesh(tmp_path / "m.txt")
    assert m.n_vertices == build_disk_mesh(1).n_vertices

    cfg_path = tmp_path / "s.json"
    cfg_path.write_text(json.dumps(SMALL_FAST))
    capsys.readouterr()
    rc = cli_main(["run", str(cfg_path), "--out", str(tmp_path / "out")])
    assert rc == 0
    out = json.loads(capsys.readouterr().out)
    assert out["feasible"] is True


def test_cli_gauge_and_hardy_on_snapshot(tmp_path, capsys):
    cfg_path = tmp_path / "s.json"
    cfg_path.write_text(json.dumps(dict(SMALL_FAST,
                                        checks=["convexity"], t_end=4.0)))
    rc = cli_main(["run", str(cfg_path), "--out", str(tmp_path / "out")])
    assert rc == 0
    capsys.readouterr()
    snap = tmp_path / "out" / "snapshot_final.u.txt"
    assert snap.exists()
    rc = cli_main(["gauge", str(snap), str(cfg_path)])
    assert rc == 0
    res = json.loads(capsys.readouterr().out)
    assert "r_gauge" in res and np.isfinite(res["r_gauge"])
    rc = cli_main(["hardy", str(snap), str(cfg_path)])
    assert rc == 0
    res = json.loads(capsys.readouterr().out)
    assert np.isfinite(res["h1_density"])
