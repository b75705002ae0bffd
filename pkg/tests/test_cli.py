from __future__ import annotations

import csv
import json
import subprocess
import sys
from pathlib import Path

import pytest

from curvflow import cli
from curvflow.errors import ConfigError

CONFIGS = Path(__file__).resolve().parent.parent / "configs"


def _write(tmp_path, cfg, name="cfg.json"):
    p = tmp_path / name
    p.write_text(json.dumps(cfg) if name.endswith(".json") else cfg)
    return str(p)


def _flow_cfg(res=8, **flow):
    return {
        "command": "flow",
        "model": {"id": "flrw-collapse", "n": 2, "T": 2.0},
        "grid": {"topology": "torus2", "resolution": res},
        "curvature": {"F": "H"},
        "f": {"kind": "constant", "value": 4.0},
        "initial": {"value": 1.7, "amplitude": 0.01, "shape": "sin"},
        "flow": {"tol_stationary": 1e-7, **flow},
    }


def _rows(path):
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


# --- exit codes -------------------------------------------------------------------------

def test_flow_exit_ok_and_outputs(tmp_path):
    out = tmp_path / "out"
    code = cli.main(["--config", _write(tmp_path, _flow_cfg()), "--out", str(out)])
    assert code == cli.EXIT_OK
    assert {p.name for p in out.iterdir()} >= {"manifest.json", "report.json",
                                              "final_state.json", "trace.csv"}
    report = json.loads((out / "report.json").read_text())
    assert report["verdict"] == "converged"
    rows = _rows(out / "trace.csv")
    ts = [float(r["t"]) for r in rows]
    assert all(b > a for a, b in zip(ts, ts[1:]))


def test_max_steps_exit(tmp_path):
    cfg = _flow_cfg(max_steps=3)
    code = cli.main(["--config", _write(tmp_path, cfg), "--out", str(tmp_path / "o")])
    assert code == cli.EXIT_MAXSTEPS


def test_lost_admissibility_exit(tmp_path):
    # K on a flat slice has kappa = 0 on the cone boundary
    cfg = _flow_cfg()
    cfg["model"] = {"id": "lorentz-product", "n": 2}
    cfg["curvature"] = {"F": "K", "Phi": "log"}
    cfg["initial"] = {"value": 0.0}
    out = tmp_path / "o"
    code = cli.main(["--config", _write(tmp_path, cfg), "--out", str(out)])
    assert code in (cli.EXIT_LOST, cli.EXIT_FAIL)
    assert (out / "error.json").exists()


@pytest.mark.parametrize("mutate,needle", [
    (lambda c: c["curvature"].update(F="Q"), "curvature.F"),
    (lambda c: c.update(bogus=1), "bogus"),
    (lambda c: c["grid"].update(resolution=4), "grid.resolution"),
    (lambda c: c["flow"].update(cfl=0.9), "flow.cfl"),
    (lambda c: c.pop("command"), "command"),
])
def test_schema_errors_exit_64(tmp_path, capsys, mutate, needle):
    cfg = _flow_cfg()
    mutate(cfg)
    code = cli.main(["--config", _write(tmp_path, cfg), "--out", str(tmp_path / "o")])
    assert code == cli.EXIT_CONFIG
    assert needle in capsys.readouterr().err


def test_json_syntax_error_reports_position(tmp_path, capsys):
    p = tmp_path / "bad.json"
    p.write_text('{\n  "command": "flow",\n  "model": {\n}')
    code = cli.main(["--config", str(p), "--out", str(tmp_path / "o")])
    assert code == cli.EXIT_CONFIG
    err = capsys.readouterr().err
    assert "line 4" in err and "column" in err


def test_toml_syntax_error(tmp_path):
    p = _write(tmp_path, 'command = "flow"\n[model\n', "bad.toml")
    assert cli.main(["--config", p, "--out", str(tmp_path / "o")]) == cli.EXIT_CONFIG


def test_missing_config_file(tmp_path):
    code = cli.main(["--config", str(tmp_path / "nope.toml"), "--out", str(tmp_path / "o")])
    assert code == cli.EXIT_CONFIG


def test_unwritable_output_exits_74(tmp_path):
    blocker = tmp_path / "file"
    blocker.write_text("x")
    code = cli.main(["--config", _write(tmp_path, _flow_cfg()), "--out", str(blocker / "sub")])
    assert code == cli.EXIT_IO


def test_missing_section_for_command(tmp_path, capsys):
    cfg = _flow_cfg()
    del cfg["f"]
    assert cli.main(["--config", _write(tmp_path, cfg), "--out", str(tmp_path / "o")]) == 64
    assert "field f" in capsys.readouterr().err


def test_validate_config_accepts_golden_files():
    for p in sorted(CONFIGS.iterdir()):
        cli.validate_config(cli.load_config(str(p)))


def test_parse_config_text_formats():
    assert cli.parse_config_text('command = "flow"', "toml") == {"command": "flow"}
    assert cli.parse_config_text('{"command": "flow"}', "json") == {"command": "flow"}
    with pytest.raises(ConfigError):
        cli.parse_config_text("{", "json")


# --- overrides and determinism ----------------------------------------------------------

def test_resolution_override(tmp_path):
    out = tmp_path / "o"
    cli.main(["--config", _write(tmp_path, _flow_cfg(16)), "--out", str(out),
              "--resolution", "8"])
    man = json.loads((out / "manifest.json").read_text())
    assert man["config"]["grid"]["resolution"] == 8
    assert len(json.loads((out / "final_state.json").read_text())["u"]) == 64


def test_seed_override(tmp_path):
    cfg = {"command": "validate-concavity", "seed": 1,
           "concavity": {"samples": 50, "cases": [{"F": "K", "n": 2}]}}
    a, b = tmp_path / "a", tmp_path / "b"
    cli.main(["--config", _write(tmp_path, cfg), "--out", str(a)])
    cli.main(["--config", _write(tmp_path, cfg), "--out", str(b), "--seed", "7"])
    assert json.loads((a / "manifest.json").read_text())["seed"] == 1
    assert json.loads((b / "manifest.json").read_text())["seed"] == 7
    assert (a / "concavity.json").read_bytes() != (b / "concavity.json").read_bytes()


def test_outputs_are_byte_identical_across_runs(tmp_path):
    p = _write(tmp_path, _flow_cfg())
    a, b = tmp_path / "a", tmp_path / "b"
    assert cli.main(["--config", p, "--out", str(a)]) == 0
    assert cli.main(["--config", p, "--out", str(b)]) == 0
    names = sorted(x.name for x in a.iterdir())
    assert names == sorted(x.name for x in b.iterdir())
    for n in names:
        assert (a / n).read_bytes() == (b / n).read_bytes(), n


# --- per-command outputs ----------------------------------------------------------------

def test_imcf_outputs(tmp_path):
    cfg = {"command": "imcf",
           "model": {"id": "flrw-collapse", "n": 2, "T": 2.0},
           "grid": {"topology": "torus2", "resolution": 8},
           "initial": {"value": 1.0, "amplitude": 0.05, "shape": "sin-product"},
           "flow": {"t_end": 0.2},
           "output": {"plot": "volume_law_error"}}
    out = tmp_path / "o"
    assert cli.main(["--config", _write(tmp_path, cfg), "--out", str(out)]) == 0
    rows = _rows(out / "trace.csv")
    assert "volume_law_error" in rows[0] and "volume" in rows[0]
    law = _rows(out / "volume_law.csv")
    assert list(law[0]) == ["t", "tau", "volume_ratio", "expected", "deviation"]
    plot = (out / "plot.dat").read_text().split("\n")
    assert len([ln for ln in plot if ln.strip()]) >= 2


def test_foliate_outputs(tmp_path):
    cfg = {"command": "foliate",
           "model": {"id": "flrw-collapse", "n": 2, "T": 2.0},
           "grid": {"topology": "torus2", "resolution": 8},
           "initial": {"value": 1.8},
           "foliation": {"taus": [4.0, 8.0]}}
    out = tmp_path / "o"
    assert cli.main(["--config", _write(tmp_path, cfg), "--out", str(out)]) == 0
    rows = _rows(out / "leaves.csv")
    assert [float(r["tau"]) for r in rows] == [4.0, 8.0]
    assert float(rows[0]["u_min"]) == pytest.approx(1.5, abs=1e-9)
    assert float(rows[1]["udot_min"]) == pytest.approx(2 / 64, rel=1e-6)
    fol = json.loads((out / "foliation.json").read_text())
    assert fol["ordering_ok"] and fol["positivity_ok"]


def test_foliate_zero_tau_is_reported(tmp_path):
    cfg = {"command": "foliate",
           "model": {"id": "flrw-collapse", "n": 2, "T": 2.0},
           "grid": {"topology": "torus2", "resolution": 8},
           "initial": {"value": 1.8},
           "foliation": {"taus": [0.0, 4.0]}}
    out = tmp_path / "o"
    assert cli.main(["--config", _write(tmp_path, cfg), "--out", str(out)]) == cli.EXIT_FAIL
    assert "unsupported" in json.loads((out / "error.json").read_text())["message"]


def test_identities_outputs(tmp_path):
    out = tmp_path / "o"
    assert cli.main(["--config", str(CONFIGS / "identities_desitter.toml"),
                     "--out", str(out)]) == 0
    rows = _rows(out / "identities.csv")
    assert {r["identity"] for r in rows} == {"metric", "normal", "shape", "vtilde", "speed"}
    for r in rows:
        assert 1.6 <= float(r["ratio"]) <= 2.4


@pytest.mark.parametrize("name,files", [
    ("barrier_circle.toml", {"barrier.json"}),
    ("convex_annulus.toml", {"convexity.json"}),
    ("decay_flrw.toml", {"decay.csv", "decay.json"}),
])
def test_check_commands(tmp_path, name, files):
    out = tmp_path / "o"
    assert cli.main(["--config", str(CONFIGS / name), "--out", str(out)]) == 0
    assert files | {"manifest.json"} == {p.name for p in out.iterdir()}


def test_module_entry_point(tmp_path):
    out = tmp_path / "o"
    proc = subprocess.run([sys.executable, "-m", "curvflow", "--config",
                           str(CONFIGS / "barrier_circle.toml"), "--out", str(out)],
                          capture_output=True, text=True)
    assert proc.returncode == 0, proc.stderr
    assert (out / "barrier.json").exists()
