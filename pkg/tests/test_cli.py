import json
import subprocess
import sys
from pathlib import Path

import pytest

from abmident import __version__
from abmident.cli import EXIT_CAPABILITY, EXIT_CONFIG, EXIT_NUMERICAL, EXIT_OK, apply_override, main
from abmident.errors import ConfigError

CONFIGS = Path(__file__).resolve().parent.parent / "configs"

SMALL = {
    "simulate": {"model": "ar1", "protocol": "simulate", "sim": {"horizon": 50, "replications": 2},
                 "master_seed": 1},
    "ergodicity": {"model": "ar1", "protocol": "ergodicity", "sim": {"horizon": 2000, "replications": 8},
                   "ergodicity": {"starts": [-10.0, 10.0]}},
    "smd": {"model": "unused", "protocol": "smd", "sim": {"horizon": 500, "replications": 4},
            "master_seed": 5,
            "smd": {"grid": {"theta1": [0.0, 2.0, 5], "theta2": [0.5, 1.5, 5], "theta3": [0.0, 1.0, 3]},
                    "moments": {"M": 2}, "target": {"seed": 5}, "step": 0.001}},
    "bayes": {"model": "ar1", "protocol": "bayes", "master_seed": 2,
              "bayes": {"data": {"horizon": 500}, "priors": {"rho": {"kind": "Uniform", "low": 0.0, "high": 0.95}},
                        "mcmc": {"draws": 100, "burn_in": 20, "proposal_scale": {"rho": 0.05},
                                 "sim": {"horizon": 500, "replications": 2}}}},
    "indirect": {"model": "twominima", "protocol": "indirect", "sim": {"horizon": 500, "replications": 6},
                 "indirect": {"grid": {"theta": [-2.0, 2.0, 9]}}},
    "oracle": {"model": "kirman", "protocol": "oracle", "sim": {"n_agents": 10},
               "oracle": {"moments": {"M": 2, "lags": [5]}, "fp": {"grid_points": 201},
                          "grid": {"epsilon": [0.05, 0.2, 5], "delta": [0.6, 0.9, 5]}}},
}

PRIMARY_CSV = {
    "simulate": ["trajectories.csv"],
    "ergodicity": ["ergodicity.json"],
    "smd": ["surface.csv"],
    "bayes": ["chain.csv"],
    "indirect": ["ii_matches.csv", "ii_surface.csv"],
    "oracle": ["stationary.csv", "fp_density.csv", "surface.csv"],
}


def write_cfg(tmp_path, cfg, name="cfg.json"):
    p = tmp_path / name
    p.write_text(json.dumps(cfg))
    return str(p)


def run(tmp_path, cfg, out, *extra):
    return main(["run", "--config", write_cfg(tmp_path, cfg), "--output", str(tmp_path / out), *extra])


@pytest.mark.parametrize("protocol", sorted(SMALL))
def test_protocol_outputs_and_manifest(tmp_path, protocol):
    assert run(tmp_path, SMALL[protocol], "o") == EXIT_OK
    out = tmp_path / "o"
    man = json.loads((out / "manifest.json").read_text())
    assert man["protocol"] == protocol and man["version"] == __version__ and man["schema_version"] == 1
    assert len(man["config_hash"]) == 64
    for f in man["outputs"]:
        assert (out / f).is_file()
        if f.endswith(".json"):
            assert "schema_version" in json.loads((out / f).read_text())
    for f in PRIMARY_CSV[protocol]:
        assert f in man["outputs"]


@pytest.mark.parametrize("protocol", sorted(SMALL))
def test_rerun_byte_identical_any_thread_count(tmp_path, protocol):
    assert run(tmp_path, SMALL[protocol], "a", "--threads", "1") == EXIT_OK
    assert run(tmp_path, SMALL[protocol], "b", "--threads", "3") == EXIT_OK
    for f in PRIMARY_CSV[protocol] + ["manifest.json"]:
        assert (tmp_path / "a" / f).read_bytes() == (tmp_path / "b" / f).read_bytes(), f


def test_unknown_model(tmp_path, capsys):
    cfg = dict(SMALL["simulate"], model="foo")
    assert run(tmp_path, cfg, "o") == EXIT_CONFIG
    assert "model" in capsys.readouterr().err


def test_unknown_key_and_protocol(tmp_path, capsys):
    assert run(tmp_path, dict(SMALL["simulate"], colour="red"), "o") == EXIT_CONFIG
    assert "colour" in capsys.readouterr().err
    assert run(tmp_path, dict(SMALL["simulate"], protocol="fit"), "o2") == EXIT_CONFIG
    assert "protocol" in capsys.readouterr().err


def test_bad_json_location(tmp_path, capsys):
    p = tmp_path / "bad.json"
    p.write_text('{"model": "ar1",\n "protocol": }')
    assert main(["run", str(p)]) == EXIT_CONFIG
    assert "line 2" in capsys.readouterr().err


def test_missing_config_file(tmp_path):
    assert main(["run", str(tmp_path / "nope.json")]) == EXIT_CONFIG


def test_override_changes_seed_and_values(tmp_path):
    cfg = SMALL["simulate"]
    assert run(tmp_path, cfg, "a") == EXIT_OK
    assert run(tmp_path, cfg, "b", "--set", "master_seed=7") == EXIT_OK
    ma = json.loads((tmp_path / "a" / "manifest.json").read_text())
    mb = json.loads((tmp_path / "b" / "manifest.json").read_text())
    assert ma["seeds"]["master_seed"] == 1 and mb["seeds"]["master_seed"] == 7
    assert (tmp_path / "a" / "trajectories.csv").read_bytes() != (tmp_path / "b" / "trajectories.csv").read_bytes()


def test_apply_override_dotted():
    cfg = {"sim": {"horizon": 10}}
    apply_override(cfg, "sim.horizon=20")
    apply_override(cfg, "smd.weight=Identity")
    apply_override(cfg, 'params={"rho": 0.2}')
    assert cfg == {"sim": {"horizon": 20}, "smd": {"weight": "Identity"}, "params": {"rho": 0.2}}
    with pytest.raises(ConfigError):
        apply_override(cfg, "novalue")


def test_numerical_exit(tmp_path, capsys):
    cfg = dict(SMALL["oracle"], params={"epsilon": 0.0, "delta": 0.8})
    cfg["oracle"] = {"moments": {"M": 1}}
    assert run(tmp_path, cfg, "o") == EXIT_NUMERICAL
    assert "stationary" in capsys.readouterr().err.lower()


def test_capability_exit(tmp_path):
    cfg = {"model": "ar1", "protocol": "oracle", "oracle": {}}
    assert run(tmp_path, cfg, "o") == EXIT_CAPABILITY


def test_bounds_error_names_param(tmp_path, capsys):
    cfg = dict(SMALL["simulate"], params={"rho": 3.0})
    assert run(tmp_path, cfg, "o") == EXIT_CONFIG
    assert "rho" in capsys.readouterr().err


class TestReport:
    def test_unused_names_theta3(self, tmp_path, capsys):
        assert run(tmp_path, SMALL["smd"], "o") == EXIT_OK
        capsys.readouterr()
        assert main(["report", str(tmp_path / "o")]) == EXIT_OK
        text = capsys.readouterr().out
        assert "UnderIdentified: theta3" in text and "classification:" in text

    def test_bayes_acceptance_echoed(self, tmp_path, capsys):
        assert run(tmp_path, SMALL["bayes"], "o") == EXIT_OK
        rate = json.loads((tmp_path / "o" / "chain.json").read_text())["acceptance_rate"]
        capsys.readouterr()
        assert main(["report", str(tmp_path / "o")]) == EXIT_OK
        assert f"acceptance rate: {rate:.4f}" in capsys.readouterr().out

    def test_missing_manifest(self, tmp_path):
        assert main(["report", str(tmp_path)]) == EXIT_CONFIG

    def test_corrupted_report(self, tmp_path, capsys):
        assert run(tmp_path, SMALL["smd"], "o") == EXIT_OK
        (tmp_path / "o" / "ident_report.json").write_text('{\n  "classification": [\n')
        capsys.readouterr()
        assert main(["report", str(tmp_path / "o")]) == EXIT_NUMERICAL
        err = capsys.readouterr().err
        assert "ident_report.json" in err and "line" in err and "column" in err

    def test_report_does_not_write(self, tmp_path):
        assert run(tmp_path, SMALL["indirect"], "o") == EXIT_OK
        before = {p.name: p.read_bytes() for p in (tmp_path / "o").iterdir()}
        assert main(["report", str(tmp_path / "o")]) == EXIT_OK
        assert {p.name: p.read_bytes() for p in (tmp_path / "o").iterdir()} == before


def test_shipped_configs_parse():
    for path in CONFIGS.glob("*.json"):
        cfg = json.loads(path.read_text())
        assert cfg["protocol"] in PRIMARY_CSV


def test_threads_env_fallback(tmp_path, monkeypatch):
    monkeypatch.setenv("ABMIDENT_THREADS", "2")
    assert run(tmp_path, SMALL["simulate"], "o") == EXIT_OK


def test_module_entry_point(tmp_path):
    res = subprocess.run([sys.executable, "-m", "abmident", "--version"], capture_output=True, text=True)
    assert res.returncode == 0 and __version__ in res.stdout
