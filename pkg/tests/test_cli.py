import csv
import json
import os
import subprocess
import sys
from pathlib import Path

import numpy as np
import pytest

from equiprec import bench, cli, geometry, md
from equiprec import model as M
from equiprec.cli import dispatch

GOLDEN = Path(__file__).parent / "golden"
HALF_POLICIES = "fp64,fp32,default=fp32,linear=bf16,acc=fp32,default=fp32,linear=fp16,acc=fp32"


@pytest.fixture(autouse=True)
def in_tmp(tmp_path, monkeypatch):
    monkeypatch.chdir(tmp_path)
    monkeypatch.delenv("EQUIPREC_THREADS", raising=False)
    return tmp_path


def _read_rows(path):
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


@pytest.mark.parametrize("argv", [["--help"]] + [[c, "--help"] for c in (
    "gen", "bench-infer", "bench-block", "cost", "compare-precision", "md", "train", "report")])
def test_help_everywhere(argv, capsys):
    assert dispatch(argv) == 0
    assert "usage:" in capsys.readouterr().out


def test_usage_errors(capsys):
    assert dispatch(["bench-inferr"]) == 2
    assert "did you mean 'bench-infer'" in capsys.readouterr().err
    assert dispatch(["gen", "--supercel", "2"]) == 2
    assert "did you mean '--supercell'" in capsys.readouterr().err
    assert dispatch([]) == 2
    assert dispatch(["gen", "--supercell", "0"]) == 2
    assert dispatch(["md", "--policy", "fp12"]) == 2
    assert dispatch(["compare-precision", "--policies", "fp64"]) == 2
    assert dispatch(["compare-precision", "--policies", "fp64,fp7"]) == 2
    assert not os.listdir(".")


def test_runtime_error_exit_code(capsys):
    assert dispatch(["md", "--checkpoint", "missing.npz", "--steps", "1"]) == 3
    assert "SetupError" in capsys.readouterr().err


def test_bad_thread_setting(monkeypatch):
    monkeypatch.setenv("EQUIPREC_THREADS", "many")
    assert dispatch(["gen"]) == 2


@pytest.mark.parametrize("text, expected", [
    ("fp64,fp32", ["fp64", "fp32"]),
    ("fp64,fp32,default=fp32,linear=bf16,acc=fp32",
     ["fp64", "fp32", "default=fp32,linear=bf16,acc=fp32"]),
    ("default=fp32,linear=bf16;default=fp32,linear=fp16",
     ["default=fp32,linear=bf16", "default=fp32,linear=fp16"]),
    ("default=fp32,linear=bf16,default=fp32,linear=fp16,acc=fp32",
     ["default=fp32,linear=bf16", "default=fp32,linear=fp16,acc=fp32"]),
])
def test_split_policies(text, expected):
    assert cli.split_policies(text) == expected


def test_compare_precision_golden(capsys):
    argv = ["compare-precision", "--policies", HALF_POLICIES, "--supercell", "1",
            "--perturb", "0.05", "--seed", "7", "--warmup", "1", "--iters", "2", "--out", "cmp"]
    assert dispatch(argv) == 0
    header = (GOLDEN / "compare_precision_header.csv").read_bytes()
    summary = Path("cmp/summary.csv").read_bytes()
    assert summary.split(b"\n")[0] + b"\n" == header
    assert tuple(header.decode().strip().split(",")) == cli.COMPARE_COLUMNS
    got, want = _read_rows("cmp/summary.csv"), _read_rows(GOLDEN / "compare_precision_seed7.csv")
    assert [r["policy"] for r in got] == [r["policy"] for r in want]
    for g, w in zip(got, want):
        for col in w:
            if col != "policy":
                assert float(g[col]) == pytest.approx(float(w[col]), rel=1e-9, abs=1e-300)
    # second route: direct model evaluation under each policy
    config = geometry.perturb(geometry.diamond_supercell(1), 0.05, seed=7)
    cfg = cli.toy_config((6,), 1, 8, 7, 4.0)
    weights = M.ModelWeights.initialize(cfg)
    e64, _ = M.forward_energy(config, weights, cfg)
    for row in got:
        forces, energy = M.compute_forces(config, weights, cfg, policy=row["policy"],
                                          return_energy=True)
        assert float(row["energy_eV"]) == energy
        assert float(row["force_eV_A"]) == pytest.approx(
            np.linalg.norm(forces, axis=1).mean(), rel=1e-12)
        assert float(row["abs_dE_eV"]) == abs(energy - e64)
    assert float(got[0]["speedup"]) == 1.0
    assert sorted(os.listdir("cmp")) == ["manifest.json", "report_0.json", "report_1.json",
                                         "report_2.json", "report_3.json", "summary.csv"]
    assert "time_ms_mean" in capsys.readouterr().out


def test_identical_policies_have_zero_deltas():
    assert dispatch(["compare-precision", "--policies", "fp32,fp32", "--warmup", "1",
                     "--iters", "3", "--out", "same"]) == 0
    a, b = _read_rows("same/summary.csv")
    for col in ("abs_dE_eV", "dE_pct", "abs_dF_eV_A", "dF_pct", "energy_std_eV"):
        assert float(b[col]) == 0.0
    assert a["energy_eV"] == b["energy_eV"]
    # timings of identical work: a noisy ratio around one
    assert 0.5 < float(b["speedup"]) < 2.0


def test_fp32_energy_band_on_toy():
    assert dispatch(["compare-precision", "--policies", "fp64,fp32", "--supercell", "2",
                     "--warmup", "1", "--iters", "1", "--out", "band"]) == 0
    _, row = _read_rows("band/summary.csv")
    assert float(row["dE_pct"]) / 100 < 1e-4


def test_manifests_cover_every_output(monkeypatch):
    monkeypatch.setenv("EQUIPREC_THREADS", "1")
    assert dispatch(["gen", "--system", "water", "--molecules", "4", "--out", "w.xyz"]) == 0
    assert dispatch(["bench-infer", "--input", "w.xyz", "--warmup", "1", "--iters", "2",
                     "--policy", "fp32", "--out", "r.json"]) == 0
    assert dispatch(["bench-infer", "--input", "w.xyz", "--backend", "ref", "--warmup", "1",
                     "--iters", "2", "--format", "csv", "--out", "r.csv"]) == 0
    assert dispatch(["bench-block", "--warmup", "1", "--iters", "2", "--out", "b.csv"]) == 0
    assert dispatch(["cost", "--out", "c.csv"]) == 0
    assert dispatch(["report", "r.json", "r.json", "--out", "rep.csv"]) == 0
    assert dispatch(["md", "--input", "w.xyz", "--steps", "4", "--log-every", "2",
                     "--frame-every", "2", "--out", "traj"]) == 0
    assert dispatch(["train", "--epochs", "2", "--train-size", "4", "--val-size", "2",
                     "--test-size", "2", "--eval-every", "1", "--out", "ck"]) == 0
    manifests = {}
    for root, _, files in os.walk("."):
        for name in files:
            if name.endswith("manifest.json"):
                path = os.path.join(root, name)
                with open(path) as fh:
                    manifests[os.path.normpath(path)] = json.load(fh)
    covered = {os.path.normpath(o) for m in manifests.values() for o in m["outputs"]}
    produced = {os.path.normpath(os.path.join(r, n)) for r, _, fs in os.walk(".") for n in fs
                if not n.endswith("manifest.json")}
    assert produced == covered
    for m in manifests.values():
        assert m["threads"] == "1" and m["version"]["equiprec"]
        assert {"subcommand", "flags", "seed", "policy", "inputs", "outputs"} <= set(m)
    bench_manifest = manifests[os.path.normpath("r.json.manifest.json")]
    assert bench_manifest["policy"] == "fp32"
    assert bench_manifest["inputs"] == {"w.xyz": cli._sha256("w.xyz")}
    assert bench.load_report("r.json").metadata["n_atoms"] == 12
    cost = _read_rows("c.csv")
    assert [r["block"] for r in cost][:4] == ["sh", "radial", "edge_tp", "symmetric_contraction"]
    assert all(r["predicted"] == r["measured"] for r in cost if r["block"].startswith("act"))
    metrics_rows = _read_rows("ck/metrics.csv")
    assert [r["split"] for r in metrics_rows] == ["val", "val", "test"]
    cfg, _ = M.load_checkpoint("ck/best.npz")
    assert cfg.species_list == (1, 8)
    frames = geometry.parse_xyz(Path("traj/frames.xyz").read_text())
    assert [f.info["step"] for f in frames] == ["0", "2", "4"]


def test_identical_invocations_reproduce_outputs():
    for out in ("a", "b"):
        assert dispatch(["gen", "--system", "water", "--molecules", "4", "--seed", "3",
                         "--out", f"{out}/w.xyz"]) == 0
        assert dispatch(["md", "--input", f"{out}/w.xyz", "--ensemble", "npt", "--tau", "50",
                         "--steps", "6", "--log-every", "2", "--policy",
                         "default=fp32,linear=bf16,acc=fp32", "--seed", "1",
                         "--out", f"{out}/traj"]) == 0
        assert dispatch(["train", "--epochs", "2", "--train-size", "4", "--val-size", "2",
                         "--test-size", "2", "--eval-every", "1", "--policy",
                         "default=fp32,linear=fp16,acc=fp32", "--out", f"{out}/ck"]) == 0
    for rel in ("w.xyz", "traj/log.csv", "traj/observables.json", "ck/metrics.csv"):
        assert Path("a", rel).read_bytes() == Path("b", rel).read_bytes()
    ma = json.loads(Path("a/traj/manifest.json").read_text())
    mb = json.loads(Path("b/traj/manifest.json").read_text())
    assert ma["inputs"][os.path.join("a", "w.xyz")] == mb["inputs"][os.path.join("b", "w.xyz")]


def test_md_abort_is_runtime_error(capsys):
    cfg = cli.toy_config((1, 8))
    weights = M.ModelWeights.initialize(cfg)
    weights["scale"] = np.array([1e9])
    M.save_checkpoint("huge.npz", cfg, weights)
    assert dispatch(["md", "--system", "water", "--molecules", "4", "--checkpoint", "huge.npz",
                     "--steps", "5", "--out", "boom"]) == 3
    assert "IntegrationAbort" in capsys.readouterr().err
    assert os.path.exists("boom/abort.xyz")
    manifest = json.loads(Path("boom/manifest.json").read_text())
    assert manifest["outputs"] == [os.path.join("boom", "abort.xyz")]


def test_md_observables_summary():
    assert dispatch(["md", "--system", "water", "--molecules", "4", "--steps", "20",
                     "--log-every", "5", "--ensemble", "nvt", "--T", "250", "--out", "t"]) == 0
    obs = json.loads(Path("t/observables.json").read_text())
    log = md.TrajectoryLog.from_csv(Path("t/log.csv").read_text())
    assert obs["T_K"]["mean"] == pytest.approx(log.column("T_K").mean(), rel=1e-12)
    assert obs["T_bias_K"] == pytest.approx(obs["T_K"]["mean"] - 250.0, rel=1e-12)


def test_console_script_entry_point(tmp_path):
    res = subprocess.run([sys.executable, "-m", "equiprec.cli", "cost", "--out",
                          str(tmp_path / "c.csv")], capture_output=True, text=True)
    assert res.returncode == 0, res.stderr
    res = subprocess.run([sys.executable, "-m", "equiprec.cli", "nope"], capture_output=True,
                         text=True)
    assert res.returncode == 2
