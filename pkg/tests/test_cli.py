import hashlib
import json
import math

import pytest

from degenlab import cli
from degenlab.cli import ConfigError, canonical, experiment_kwargs, load_config, main, validate


@pytest.mark.parametrize("cfg, key", [
    ({"colour": 1}, "colour"),
    ({"schema": 2}, "schema"),
    ({"experiments": ["nope"]}, "experiments"),
    ({"grid": "64"}, "grid"),
    ({"grid": True}, "grid"),
    ({"tol": 2.0}, "tol"),
    ({"domain": "torus"}, "domain"),
    ({"params": {"solve": {"bogus": 1}}}, "params.solve.bogus"),
    ({"params": {"solve": {"out": "x"}}}, "params.solve.out"),
    ({"experiments": ["audit"], "gamma": 5.0}, "gamma"),
    ({"experiments": ["fractional"], "gamma": 1.0}, "gamma"),
    ({"experiments": ["solve"], "grid": 192}, "grid"),
    ({"experiments": ["compare"], "grid": 1024}, "grid"),
    ({"experiments": ["green"], "grid": 98, "levels": 3}, "grid"),
    ({"experiments": ["green"], "grid": 32, "levels": 4}, "levels"),
    ({"experiments": ["hm"], "levels": 3}, "levels"),
])
def test_invalid_configs_name_the_key(cfg, key):
    with pytest.raises(ConfigError) as exc:
        validate(cfg)
    assert exc.value.key == key


def test_defaults_cover_every_experiment():
    cfg = validate({})
    assert cfg["experiments"] == cli.ORDER and cfg["seed"] == 0 and cfg["strict"] is False


def test_experiments_follow_catalog_order():
    assert validate({"experiments": ["study", "audit"]})["experiments"] == \
        [e for e in cli.ORDER if e in ("study", "audit")]


def test_bad_json_is_reported(tmp_path):
    p = tmp_path / "c.json"
    p.write_text("{not json")
    with pytest.raises(ConfigError):
        load_config(p)


def test_flags_map_to_experiment_arguments():
    cfg = validate({"experiments": ["solve", "fractional", "regularity", "hm"],
                    "domain": "halfspace3d", "gamma": 0.5, "grid": 64, "levels": 3})
    assert experiment_kwargs("solve", cfg)["levels"] == (16, 32, 64)
    assert experiment_kwargs("solve", cfg)["domain_id"] == "halfspace3d"
    assert experiment_kwargs("fractional", cfg)["gammas"] == (0.5,)
    assert experiment_kwargs("fractional", cfg)["N"] == 64
    assert experiment_kwargs("regularity", cfg)["holder_domains"] == ("halfspace3d",)
    assert "levels" not in experiment_kwargs("hm", cfg)


def test_canonical_json_is_stable():
    a = canonical({"b": [1.0, math.nan], "a": math.inf})
    assert a == canonical({"a": math.inf, "b": [1.0, math.nan]})
    assert json.loads(a) == {"a": None, "b": [1.0, None]}


def test_usage_errors_exit_with_two(tmp_path):
    with pytest.raises(SystemExit) as exc:
        main(["audit", "--gamma", "9", "--out", str(tmp_path)])
    assert exc.value.code == 2


@pytest.fixture(scope="module")
def audit_run(tmp_path_factory):
    out = tmp_path_factory.mktemp("audit")
    code = main(["audit", "--strict", "--seed", "3", "--out", str(out)])
    return code, out


def test_audit_run_writes_manifest(audit_run, capsys):
    code, out = audit_run
    assert code == 0
    manifest = (out / "manifest.json").read_bytes()
    assert (out / "manifest.sha256").read_text().split()[0] == hashlib.sha256(manifest).hexdigest()
    m = json.loads(manifest)
    assert m["pass"] and m["strict"] and m["config"]["seed"] == 3
    assert [v["experiment"] for v in m["verdicts"]] == ["audit"]
    assert "wall" not in manifest.decode()
    assert "audit" in json.loads((out / "timings.json").read_text())


def test_strict_runs_are_bit_identical(audit_run, tmp_path):
    _, out = audit_run
    assert main(["audit", "--strict", "--seed", "3", "--out", str(tmp_path)]) == 0
    assert (tmp_path / "manifest.json").read_bytes() == (out / "manifest.json").read_bytes()


def test_report_reuses_existing_run(audit_run, capsys):
    _, out = audit_run
    assert main(["report", "--out", str(out)]) == 0
    assert (out / "figures" / "verdicts.png").stat().st_size > 0
    assert "PASS  audit" in capsys.readouterr().out


def test_failing_verdict_exits_with_one(tmp_path, capsys):
    # 64 points per period cannot resolve the extension band at the stated tolerance
    assert main(["fractional", "--grid", "64", "--strict", "--out", str(tmp_path)]) == 1
    assert "FAIL  fractional" in capsys.readouterr().out
    assert json.loads((tmp_path / "manifest.json").read_text())["pass"] is False


def test_config_file_round_trip(tmp_path):
    cfg = tmp_path / "run.json"
    cfg.write_text(json.dumps({"schema": 1, "experiments": ["study"], "seed": 1, "strict": True,
                               "out": str(tmp_path / "r")}))
    assert main(["report", "--config", str(cfg)]) == 0
    m = json.loads((tmp_path / "r" / "manifest.json").read_text())
    assert "out" not in m["config"]
    assert (tmp_path / "r" / "figures" / "convergence.png").exists()
