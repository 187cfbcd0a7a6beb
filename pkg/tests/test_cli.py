import csv
import json

import pytest
import yaml

from discrete_inertia import integrator
from discrete_inertia.cli import UsageError, compare_summaries, main, parse_overrides
from discrete_inertia.errors import StepFailure
from discrete_inertia.scenario import dump_scenario, wscc9_builtin

QUICK = ["run", "--builtin", "wscc9-sdd", "--dd-count", "450", "--t-end", "1.5"]


def run_cli(tmp_path, name, *extra):
    out = tmp_path / name
    rc = main(QUICK + ["-o", str(out), *extra])
    return rc, out


@pytest.fixture(scope="module")
def two_runs(tmp_path_factory):
    tmp = tmp_path_factory.mktemp("cli")
    a = run_cli(tmp, "a", "--seed", "5")
    b = run_cli(tmp, "b", "--seed", "5")
    return tmp, a, b


def test_run_writes_outputs(two_runs):
    _, (rc, out), _ = two_runs
    assert rc == 0
    for f in ("scenario.yaml", "timeseries.csv", "switches.csv", "summary.json", "summary.txt", "manifest.json"):
        assert (out / f).is_file(), f
    with open(out / "timeseries.csv") as fh:
        header = next(csv.reader(row for row in fh if not row.startswith("#")))
    assert header[0] == "t" and "f_5" in header
    s = json.loads((out / "summary.json").read_text())
    assert s["dd_count"] == 450 and s["seed"] == 5
    assert yaml.safe_load((out / "scenario.yaml").read_text())["run"]["seed"] == 5


def test_reruns_are_byte_identical(two_runs):
    _, (_, a), (_, b) = two_runs
    for f in ("timeseries.csv", "switches.csv", "summary.json", "scenario.yaml"):
        assert (a / f).read_bytes() == (b / f).read_bytes(), f


def test_compare_identical(two_runs, capsys):
    tmp, (_, a), (_, b) = two_runs
    capsys.readouterr()
    rc = main(["compare", str(a), str(b), "--json", str(tmp / "cmp.json")])
    out = capsys.readouterr().out
    assert rc == 0
    assert "WARNING" not in out
    rep = json.loads((tmp / "cmp.json").read_text())
    assert all(r["delta"] == 0.0 for r in rep["metrics"].values())


def test_compare_flags_different_scenarios(two_runs, tmp_path, capsys):
    _, (_, a), _ = two_runs
    rc, c = run_cli(tmp_path, "c", "--set", "R=0.01")
    assert rc == 0
    capsys.readouterr()
    assert main(["compare", str(a), str(c / "summary.json")]) == 0
    assert "WARNING: runs use different scenarios" in capsys.readouterr().out


def test_compare_missing_summary(tmp_path):
    assert main(["compare", str(tmp_path), str(tmp_path)]) == 2


def test_set_override_applied(tmp_path):
    out = tmp_path / "o"
    rc = main(["run", "--builtin", "wscc9-sdd", "--t-end", "1.0", "--set", "K_p=7.5", "--set", "dd_count=90",
               "-o", str(out)])
    assert rc == 0
    doc = yaml.safe_load((out / "scenario.yaml").read_text())
    assert {e["params"]["K_p"] for e in doc["fleet"]} == {7.5}
    assert sum(e["count"] for e in doc["fleet"]) == 90


def test_scenario_file_with_override(tmp_path):
    sc = wscc9_builtin("SDD", 180, t_end=1.0)
    p = tmp_path / "in.yaml"
    dump_scenario(sc, p)
    out = tmp_path / "f"
    assert main(["run", "--scenario", str(p), "--set", "dd_count=360", "-o", str(out)]) == 0
    doc = yaml.safe_load((out / "scenario.yaml").read_text())
    assert sum(e["count"] for e in doc["fleet"]) == 360


def test_seed_sweep(tmp_path):
    rc, out = run_cli(tmp_path, "sw", "--seed", "1", "2", "--t-end", "0.5")
    assert rc == 0
    assert (out / "seed_1" / "summary.json").is_file()
    assert (out / "seed_2" / "summary.json").is_file()


def test_conflicting_flag_and_override(tmp_path):
    rc, _ = run_cli(tmp_path, "cf", "--set", "dd_count=90")
    assert rc == 2


def test_unknown_override_key(tmp_path):
    rc, _ = run_cli(tmp_path, "x", "--set", "colour=blue")
    assert rc == 2


def test_invalid_scenario_file(tmp_path):
    p = tmp_path / "bad.yaml"
    p.write_text("schema_version: 1\nbuses: []\n")
    assert main(["run", "--scenario", str(p), "-o", str(tmp_path / "out")]) == 2


def test_numerical_failure_exit_code(tmp_path, monkeypatch, capsys):
    real = integrator.Stepper.step

    def broken(self, x0, y0, h, t=0.0, f0=None):
        if t > 1.2:
            raise StepFailure("forced", t=t, bus=4, mismatch=0.5)
        return real(self, x0, y0, h, t, f0)

    monkeypatch.setattr(integrator.Stepper, "step", broken)
    rc, out = run_cli(tmp_path, "fail")
    assert rc == 3
    assert "bus 4" in capsys.readouterr().err
    assert (out / "timeseries.csv").is_file()
    assert json.loads((out / "summary.json").read_text())["failure"]["bus"] == 4


def test_early_failure_still_writes_series(tmp_path, monkeypatch):
    def broken(self, x0, y0, h, t=0.0, f0=None):
        raise StepFailure("forced", t=t, bus=2, mismatch=0.5)

    monkeypatch.setattr(integrator.Stepper, "step", broken)
    rc, out = run_cli(tmp_path, "early")
    assert rc == 3
    assert (out / "timeseries.csv").is_file()
    assert "too short" in (out / "summary.txt").read_text()


def test_help_and_unknown_flag(capsys):
    with pytest.raises(SystemExit) as exc:
        main(["run", "--help"])
    assert exc.value.code == 0
    assert "--dd-count" in capsys.readouterr().out
    with pytest.raises(SystemExit) as exc:
        main(["run", "--builtin", "wscc9-sdd", "-o", "x", "--frobnicate"])
    assert exc.value.code == 2


def test_parse_overrides():
    assert parse_overrides(["R=0.01", "mode=CDD", "seed=3"]) == {"R": 0.01, "mode": "CDD", "seed": 3}
    with pytest.raises(UsageError):
        parse_overrides(["R"])


def test_compare_handles_never_settled():
    a = {"settle_time": None, "freq_zenith": 1.01, "scenario_digest": "x"}
    b = {"settle_time": 3.0, "freq_zenith": 1.005, "scenario_digest": "x"}
    rep = compare_summaries(a, b)
    assert rep["metrics"]["zenith_dev"]["delta"] == pytest.approx(-0.005)
    assert rep["metrics"]["settle_time"]["delta"] == float("-inf")
    assert rep["warnings"] == []
