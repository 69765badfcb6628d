import io
import json
import os
import subprocess
import sys

import pytest

from prescribed_sde import cli


@pytest.fixture
def out(tmp_path, monkeypatch):
    monkeypatch.setenv(cli.OUT_ENV, str(tmp_path / "out"))
    return tmp_path / "out"


def run(*argv):
    return cli.main(list(argv))


def report_of(out, stem):
    with open(out / f"{stem}-report.json") as fh:
        return json.load(fh)


def test_validate_ou_gauss(out, capsys):
    assert run("validate", "ou-gauss") == 0
    rep = report_of(out, "validate-ou-gauss")
    assert rep["summary"] == {"pass": 9, "fail": 0, "warn": 0}
    assert "9 passed, 0 failed" in capsys.readouterr().out


def test_validate_negative_control(out):
    assert run("validate", "broken-drift") == 1
    entries = {e["check_id"]: e for e in report_of(out, "validate-broken-drift")["entries"]}
    assert entries["divergence_free"]["status"] == "fail"


def test_usage_errors(out, capsys):
    assert run() == 2
    assert run("validate") == 2
    assert run("validate", "ou-gauss", "--scenario", "ou-psi") == 2
    assert run("frobnicate") == 2
    assert run("validate", "no-such-scenario") == 2
    assert run("simulate", "ou-gauss", "--paths", "many") == 2
    assert "usage error" in capsys.readouterr().err


def test_config_error_exit_code(out, tmp_path, capsys):
    p = tmp_path / "bad.toml"
    p.write_text('[scenario]\nname = "singular-rotation"\n[params]\nalpha = 2.5\n')
    assert run("validate", "--config", str(p)) == 2
    assert "alpha must satisfy" in capsys.readouterr().err


def test_out_dir_flag_wins_over_env(out, tmp_path):
    target = tmp_path / "elsewhere"
    assert run("validate", "ou-gauss", "--out-dir", str(target)) == 0
    assert (target / "validate-ou-gauss-report.json").exists()
    assert not out.exists()


def test_manifest_lists_outputs_and_round_trips(out):
    assert run("simulate", "ou-gauss", "--paths", "400", "--dt", "0.01", "--horizon", "1", "--seed", "5",
               "--test", "martingale") in (0, 1)
    man_path = out / "simulate-ou-gauss-manifest.json"
    man = json.loads(man_path.read_text())
    assert man["options"]["seed"] == 5 and man["options"]["paths"] == 400
    for f in man["outputs"]:
        assert os.path.exists(f), f
    assert any(f.endswith(".py") for f in man["outputs"])  # plotting script
    first = report_of(out, "simulate-ou-gauss")
    assert run("simulate", "--manifest", str(man_path)) in (0, 1)
    second = report_of(out, "simulate-ou-gauss")
    assert [e["metric"] for e in first["entries"]] == [e["metric"] for e in second["entries"]]


def test_resolvent_command(out):
    assert run("resolvent", "ou-gauss", "d=1", "--boxes", "1,2,3,4,5,6", "--alpha", "1") == 0
    rep = report_of(out, "resolvent-ou-gauss")
    assert all(e["status"] != "fail" for e in rep["entries"])
    man = json.loads((out / "resolvent-ou-gauss-manifest.json").read_text())
    assert any(f.endswith(".csv") for f in man["outputs"])


def test_report_merges_manifests(out):
    run("validate", "ou-gauss")
    run("validate", "broken-drift")
    code = run("report", str(out / "validate-ou-gauss-manifest.json"),
               str(out / "validate-broken-drift-manifest.json"))
    assert code == 1
    merged = json.loads((out / "consolidated-report.json").read_text())
    ids = [e["check_id"] for e in merged["entries"]]
    assert "validate:ou-gauss/divergence_free" in ids and "validate:broken-drift/divergence_free" in ids
    assert merged["summary"]["pass"] + merged["summary"]["fail"] == 18


def test_tolerance_scale_multiplies_tolerances(out):
    run("validate", "ou-gauss", "--tolerance-scale", "1e3")
    entries = {e["check_id"]: e for e in report_of(out, "validate-ou-gauss")["entries"]}
    assert entries["divergence_free"]["tolerance"] == pytest.approx(1e-3)
    man = json.loads((out / "validate-ou-gauss-manifest.json").read_text())
    assert man["tolerance_scale"] == 1e3


def test_console_script_entry_point(out):
    r = subprocess.run([sys.executable, "-m", "prescribed_sde.cli", "--version"], capture_output=True, text=True)
    assert r.returncode == 0 and "prescribed-sde" in r.stdout
