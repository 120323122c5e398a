import json
import subprocess
import sys

import numpy as np
import pytest

from gliomacal.cli import main
from gliomacal.volume_io import read_volume

TINY_SPEC = {"dims": [20, 20, 20], "spacing_mm": 3.0, "rho": 0.05, "T": 150.0}


def run_cli(*args):
    return main([str(a) for a in args])


def test_help_lists_subcommands():
    out = subprocess.run([sys.executable, "-m", "gliomacal.cli", "--help"], capture_output=True, text=True)
    assert out.returncode == 0
    for name in ("simulate", "synth", "calibrate", "propagate", "plan", "evaluate", "selftest"):
        assert name in out.stdout


def test_unknown_subcommand(capsys):
    with pytest.raises(SystemExit) as exc:
        run_cli("frobnicate")
    assert exc.value.code == 2
    err = json.loads(capsys.readouterr().err.strip().splitlines()[-1])
    assert err["error"] == "usage"


def test_unknown_flag(capsys):
    with pytest.raises(SystemExit) as exc:
        run_cli("selftest", "--bogus")
    assert exc.value.code == 2


def test_simulate_phantom(tmp_path):
    params = tmp_path / "params.json"
    params.write_text(json.dumps({"D_w": 0.13, "rho": 0.025, "T": 302.0}))
    out = tmp_path / "sim" / "u.vol"
    assert run_cli("simulate", "--dims", 64, 64, 64, "--spacing", 2.0, "--params", params, "--out", out) == 0
    u = read_volume(out)
    assert u.data.max() > 0.7 and u.data.min() >= 0
    manifest = json.loads((tmp_path / "sim" / "run_manifest.json").read_text())
    assert manifest["subcommand"] == "simulate" and len(manifest["config_hash"]) == 16
    assert set(manifest["versions"]) >= {"gliomacal", "numpy", "scipy", "numba"}


def test_io_error(tmp_path, capsys):
    code = run_cli("propagate", "--ensemble", tmp_path / "none", "--anatomy", tmp_path / "a.json", "--out", tmp_path / "o")
    assert code == 3
    assert json.loads(capsys.readouterr().err)["error"] == "io"


def test_numerical_error(tmp_path, capsys):
    params = tmp_path / "params.json"
    params.write_text(json.dumps({"D_w": 0.1, "rho": 0.1, "T": 10.0, "ic_mm": [0.0, 0.0, 0.0]}))
    code = run_cli("simulate", "--dims", 16, 16, 16, "--params", params, "--out", tmp_path / "u.vol")
    assert code == 4
    assert json.loads(capsys.readouterr().err)["error"] == "numerical"


def test_config_error(tmp_path, capsys):
    params = tmp_path / "params.json"
    params.write_text(json.dumps({"D_w": -1, "rho": 0.1, "T": 10.0}))
    assert run_cli("simulate", "--dims", 16, 16, 16, "--params", params, "--out", tmp_path / "u.vol") == 2


def test_selftest(capsys):
    assert run_cli("selftest") == 0
    out = capsys.readouterr().out
    assert out.count("PASS") == 3


@pytest.fixture(scope="module")
def pipeline(tmp_path_factory):
    root = tmp_path_factory.mktemp("pipe")
    (root / "synth.json").write_text(json.dumps(TINY_SPEC))
    (root / "cal.json").write_text(json.dumps({"tmcmc": {"n_samples": 100, "chain_steps": 1, "beta2": 0.2}}))
    assert run_cli("synth", "--spec", root / "synth.json", "--out", root / "case") == 0
    args = ("calibrate", "--anatomy", root / "case/anatomy/anatomy.json", "--observations",
            root / "case/observations.json", "--config", root / "cal.json", "--seed", 3)
    assert run_cli(*args, "--out", root / "ens") == 0
    assert run_cli(*args, "--out", root / "ens2") == 0
    return root


def test_pipeline_outputs(pipeline):
    root = pipeline
    for name in ("observations.json", "gt_u.vol", "gt_theta.json", "run_manifest.json"):
        assert (root / "case" / name).exists()
    assert (root / "ens/samples.csv").read_bytes() == (root / "ens2/samples.csv").read_bytes()
    m1 = json.loads((root / "ens/run_manifest.json").read_text())
    m2 = json.loads((root / "ens2/run_manifest.json").read_text())
    assert m1["config_hash"] == m2["config_hash"] and m1["seeds"] == {"rng_seed": 3}

    anat = root / "case/anatomy/anatomy.json"
    assert run_cli("propagate", "--ensemble", root / "ens", "--anatomy", anat, "--n-prop", 10, "--out", root / "maps") == 0
    stats = json.loads((root / "maps/stats.json").read_text())
    assert stats["n_prop"] + stats["skipped"] == 10
    assert run_cli("plan", "--maps", root / "maps", "--mode", "map", "--out", root / "plans") == 0
    assert run_cli("plan", "--mode", "rtog", "--seg", root / "case/flair.vol", "--anatomy", anat, "--out", root / "plans") == 0
    assert run_cli("plan", "--maps", root / "maps", "--mode", "escalation", "--levels", 0.3, "--out", root / "esc") == 0
    assert (root / "esc/escalation_0.3.vol").exists()

    gt = read_volume(root / "case/gt_u.vol")
    from gliomacal.volume_io import Volume, write_volume

    write_volume(root / "rec.vol", Volume(gt.meta, gt.data >= 0.001))
    plans = [root / "plans/ctv_map_0.001.vol", root / "plans/ctv_rtog_20mm.vol"]
    assert run_cli("evaluate", "--plan", *plans, "--recurrence", root / "rec.vol", "--out", root / "eval") == 0
    rows = json.loads((root / "eval/metrics.json").read_text())
    assert [r["plan"] for r in rows] == ["ctv_map_0.001", "ctv_rtog_20mm"]
    assert all(0 <= r["efficiency_percent"] <= 100 for r in rows)
    assert (root / "eval/run_manifest.json").exists()


def test_plan_requires_maps(tmp_path):
    with pytest.raises(SystemExit) as exc:
        run_cli("plan", "--mode", "map", "--out", tmp_path)
    assert exc.value.code == 2
