import csv
import json
import shutil
import subprocess
from fractions import Fraction as F

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from nilwalk.affine import validate
from nilwalk.cli import COMMANDS, ExperimentConfig, UsageError, main, parse_scalar
from nilwalk.scenarios import REGISTRY, ScenarioError, list_scenarios, scenario


# --- registry -----------------------------------------------------------------

def test_registry_builds_valid_scenarios():
    for name in REGISTRY:
        if name == "heisenberg-number-field":
            continue
        d = scenario(name)
        assert d.anchor and d.name == name
        assert all(validate(g.aut, d.schema) for g in d.measure.support)
        assert sum(d.measure.weights) == 1


def test_number_field_scenario_is_a_stub():
    with pytest.raises(ScenarioError, match="out of scope"):
        scenario("heisenberg-number-field")
    with pytest.raises(ScenarioError):
        scenario("nope")


def test_free_2step_is_arithmetic_only():
    assert scenario("free-2step").arithmetic_only
    assert not scenario("heisenberg-sl2").arithmetic_only
    names = {s["name"]: s for s in list_scenarios()}
    assert names["free-2step"]["arithmetic_only"]


def test_block_triangular_parameters():
    d = scenario("block-triangular", d=2, k=2)
    assert d.schema.n == 4 and d.Z.dim == 2
    with pytest.raises(ScenarioError):
        scenario("block-triangular", d=1)


# --- configs ------------------------------------------------------------------------

config_st = st.builds(
    dict,
    command=st.sampled_from(sorted(COMMANDS)),
    scenario=st.sampled_from(list(REGISTRY)),
    seed=st.integers(0, 2 ** 31),
    out=st.text("abc/", min_size=1, max_size=8),
    threads=st.one_of(st.none(), st.integers(1, 8)),
)


@settings(max_examples=50, deadline=None)
@given(config_st)
def test_config_round_trip(obj):
    cfg = ExperimentConfig.from_json(json.dumps(obj))
    back = ExperimentConfig.from_json(json.dumps(cfg.to_json()))
    assert back == cfg
    # threads and the output directory do not change results, so not the hash
    assert ExperimentConfig.from_json({**obj, "threads": 3, "out": "zz"}).hash() == cfg.hash()
    assert ExperimentConfig.from_json({**obj, "seed": obj["seed"] + 1}).hash() != cfg.hash()


def test_unknown_keys_are_rejected():
    with pytest.raises(UsageError):
        ExperimentConfig.from_json({"command": "walk", "colour": "red"})
    with pytest.raises(UsageError):
        ExperimentConfig.from_json({"command": "walk", "params": {"steps": 3}})
    with pytest.raises(UsageError):
        ExperimentConfig.from_json({"command": "walk", "scenario": "x", "inline": {}})
    with pytest.raises(UsageError):
        ExperimentConfig.from_json({"seed": -1})


def test_parse_scalar():
    assert parse_scalar("1/3") == F(1, 3)
    assert parse_scalar(2) == F(2)
    assert abs(parse_scalar("sqrt(2)-1") - 0.41421356) < 1e-8
    with pytest.raises(UsageError):
        parse_scalar(True)


# --- command line ----------------------------------------------------------------------

def run_cli(tmp_path, command, cfg, *extra):
    path = tmp_path / "cfg.json"
    cfg = {"out": str(tmp_path / "out"), **cfg}
    path.write_text(json.dumps(cfg))
    return main([command, "--config", str(path), *extra])


def error_body(tmp_path):
    return json.loads((tmp_path / "out" / "error.json").read_text())


def test_exit_zero_and_hash_in_every_file(tmp_path, capsys):
    code = run_cli(tmp_path, "tau", {"scenario": "heisenberg-sl2", "params": {"m_max": 8}}, "--plot")
    assert code == 0
    res = json.loads(capsys.readouterr().out)
    h = res["config_hash"]
    assert res["files"]
    for f in res["files"]:
        text = open(f).read()
        if f.endswith(".json"):
            assert json.loads(text)["config_hash"] == h
        elif f.endswith(".csv"):
            assert text.splitlines()[0].startswith(f"# nilwalk-csv v1 config_hash={h}")
        else:
            assert f'data-config-hash="{h}"' in text


def test_tau_on_heisenberg_has_bounded_counts(tmp_path, capsys):
    assert run_cli(tmp_path, "tau", {"scenario": "heisenberg-sl2", "params": {"m_max": 10}}) == 0
    out = tmp_path / "out"
    with open(out / "tau_counts_kappa0.1.csv") as fh:
        rows = list(csv.reader(line for line in fh if not line.startswith("#")))[1:]
    assert all(int(float(c)) <= 2 for _, c in rows)
    assert json.loads((out / "tau.json").read_text())["estimates"]["tau_hat"][0] == 0.0


def test_usage_errors_exit_one(tmp_path, capsys):
    assert run_cli(tmp_path, "walk", {"scenario": "heisenberg-sl2", "params": {"bogus": 1}}) == 1
    assert error_body(tmp_path)["error"] == "usage"
    assert run_cli(tmp_path, "walk", {"scenario": "heisenberg-number-field", "params": {"x": [0, 0, 0]}}) == 1
    assert "out of scope" in error_body(tmp_path)["message"]
    assert main(["walk"]) == 1
    assert main(["no-such-command"]) == 1
    err = capsys.readouterr().err
    assert '"exit_code": 1' in err


def test_arithmetic_only_blocks_equidistribution_commands(tmp_path, capsys):
    assert run_cli(tmp_path, "wasserstein", {"scenario": "free-2step", "params": {"x": [0] * 6}}) == 1
    assert "arithmetic-only" in error_body(tmp_path)["message"]
    assert run_cli(tmp_path, "tau", {"scenario": "free-2step", "params": {"m_max": 3}}) == 0


def test_analytic_failures_exit_two(tmp_path, capsys):
    cfg = {"scenario": "heisenberg-sl2", "params": {"x": [0, 0, 0], "m": 12, "mode": "exact", "cap": 50}}
    assert run_cli(tmp_path, "walk", cfg) == 2
    body = error_body(tmp_path)
    assert body["error"] == "analytic-failure" and body["exit_code"] == 2


def test_walk_threads_do_not_change_files(tmp_path, capsys):
    cfg = {"scenario": "heisenberg-sl2", "seed": 5, "params": {"x": ["1/3", "1/5", "1/7"], "m": 6,
                                                              "trials": 3000}}
    outs = []
    for th in ("1", "3"):
        d = tmp_path / th
        d.mkdir()
        assert run_cli(d, "walk", cfg, "--threads", th) == 0
        outs.append((d / "out" / "walk.csv").read_text())
    assert outs[0] == outs[1]


def test_scenario_list(tmp_path, capsys):
    assert main(["scenario", "list", "--out", str(tmp_path)]) == 0
    blob = json.loads((tmp_path / "scenarios.json").read_text())
    assert {s["name"] for s in blob["scenarios"]} >= {"heisenberg-sl2", "block-triangular", "bflm-torus",
                                                      "free-2step"}
    assert main(["scenario", "show", "--out", str(tmp_path)]) == 1


def test_dichotomy_tags(tmp_path, capsys):
    cfg = {"scenario": "heisenberg-sl2",
           "params": {"xs": [["1/2", "1/2", 0], ["sqrt(2)-1", "sqrt(3)-1", "1/7"]],
                      "schedule": [2, 8, 12], "trials": 20000, "threshold": 0.05}}
    assert run_cli(tmp_path, "dichotomy", cfg) == 0
    rows = json.loads((tmp_path / "out" / "dichotomy.json").read_text())["rows"]
    assert rows[0]["tag"] == "obstructed" and rows[0]["denominator"] == 2
    assert rows[1]["tag"] == "decaying"


def test_console_script_is_installed():
    exe = shutil.which("nilwalk")
    if exe is None:
        pytest.skip("console script not on PATH")
    r = subprocess.run([exe, "--help"], capture_output=True, text=True)
    assert r.returncode == 0 and "nilwalk" in r.stdout


def test_bare_generators_without_scenario(tmp_path, capsys):
    cfg = {"params": {"gens": [[[0, -1], [1, 0]]], "h": 2}}
    assert run_cli(tmp_path, "detect-subgroups", cfg) == 0
    blob = json.loads((tmp_path / "out" / "subgroups.json").read_text())
    assert sorted(s["index"] for s in blob["subgroups"]) == [1, 2]
    assert run_cli(tmp_path, "detect-subgroups", {"params": {"h": 2}}) == 1
    assert run_cli(tmp_path, "walk", {"params": {"x": [0, 0]}}) == 1
