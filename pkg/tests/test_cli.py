import json

import pytest

from inrd.cli import main
from inrd.io import load_checkpoint, read_csv

SMALL = ["--width", "8", "--layers", "3", "--size", "12", "--count", "2"]


def run(tmp_path, *argv):
    return main([*argv, "--out", str(tmp_path / "runs")])


@pytest.fixture(scope="module")
def cohort(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    assert main(["cohort-train", "--synth", "bandlimited", *SMALL, "--iters", "10", "--lr", "1e-3",
                 "--run-id", "c", "--out", str(root / "runs")]) == 0
    return root, root / "runs" / "c" / "checkpoints" / "cohort.ckpt"


def test_fit_rank_sweep_pipeline(cohort, tmp_path):
    root, ckpt = cohort
    assert run(tmp_path, "rank", "--ckpt", str(ckpt), "--samples", "64", "--run-id", "r") == 0
    rows = read_csv(tmp_path / "runs" / "r" / "csv" / "rank.csv")
    assert [r["layer"] for r in rows] == ["0", "1", "2"]
    assert run(tmp_path, "freeze-sweep", "--ckpt", str(ckpt), "--synth", "bandlimited", "--size", "12",
               "--count", "1", "--iters", "3", "--seeds", "2", "--run-id", "f") == 0
    rows = read_csv(tmp_path / "runs" / "f" / "csv" / "sweep.csv")
    assert len(rows) == 4 * 2 and {r["tau"] for r in rows} == {"0", "1", "2", "none"}
    assert run(tmp_path, "synth", "--count", "1", "--size", "8", "--run-id", "y") == 0
    png = tmp_path / "runs" / "y" / "images" / "bandlimited_000.png"
    assert run(tmp_path, "fit", str(png), "--width", "8", "--layers", "2", "--iters", "3", "--run-id", "fit") == 0
    assert load_checkpoint(tmp_path / "runs" / "fit" / "checkpoints" / "model.ckpt").depth == 2


def test_tau_out_of_range_is_user_error(cohort, tmp_path, capsys):
    _, ckpt = cohort
    assert run(tmp_path, "freeze-sweep", "--ckpt", str(ckpt), "--tau", "7", "--synth", "blobs") == 1
    assert "--tau 7" in capsys.readouterr().err


def test_unknown_flag_prints_usage(tmp_path, capsys):
    assert main(["rank", "--bogus"]) == 1
    assert "usage" in capsys.readouterr().err
    assert main(["nonsense"]) == 1
    assert run(tmp_path, "rank", "--ckpt", str(tmp_path / "missing.ckpt")) == 1


def test_numeric_failure_exit_code(tmp_path):
    assert run(tmp_path, "cohort-train", "--synth", "blobs", *SMALL, "--iters", "5", "--lr", "1e300") == 2


def test_rerun_reproduces_csv_bytes(cohort, tmp_path):
    _, ckpt = cohort
    args = ["freeze-sweep", "--ckpt", str(ckpt), "--synth", "blobs", "--size", "12", "--count", "1",
            "--iters", "3", "--seeds", "1", "--tau", "1"]
    assert main([*args, "--out", str(tmp_path / "a")]) == 0
    assert main([*args, "--out", str(tmp_path / "b")]) == 0
    a = next((tmp_path / "a").glob("*/csv/sweep.csv")).read_bytes()
    b = next((tmp_path / "b").glob("*/csv/sweep.csv")).read_bytes()
    assert a == b


def test_sae_atoms_gallery_and_manifest(cohort, tmp_path):
    _, ckpt = cohort
    assert run(tmp_path, "sae-train", "--ckpt", str(ckpt), "--layer", "1", "--dict-size", "16", "--topk", "2",
               "--iters", "5", "--batch", "64", "--run-id", "s") == 0
    sae = tmp_path / "runs" / "s" / "checkpoints" / "sae_l1.ckpt"
    assert run(tmp_path, "atom-map", "--ckpt", str(ckpt), "--sae", str(sae), "--atoms", "0", "3", "--run-id", "a") == 0
    assert run(tmp_path, "ablate", "--ckpt", str(ckpt), "--sae", str(sae), "--atoms", "0", "--run-id", "b") == 0
    assert run(tmp_path, "gallery", "--ckpt", str(ckpt), "--sae", str(sae), "--top", "3", "--run-id", "g") == 0
    assert run(tmp_path, "sae-sweep", "--ckpt", str(ckpt), "--layer-list", "0", "2", "--dict-sizes", "8",
               "--topks", "1", "2", "--iters", "3", "--batch", "64", "--run-id", "ss") == 0
    assert len(read_csv(tmp_path / "runs" / "ss" / "csv" / "sae_sweep.csv")) == 4
    for rid in ("s", "a", "b", "g", "ss"):
        run_dir = tmp_path / "runs" / rid
        manifest = json.loads((run_dir / "manifest.json").read_text())
        on_disk = {str(p.relative_to(run_dir)) for p in run_dir.rglob("*")
                   if p.is_file() and p.suffix in (".csv", ".png", ".ckpt")}
        assert on_disk == set(manifest["artifacts"])
        assert manifest["inputs"] and manifest["config"]["seed"] == 0


def test_config_file_with_flag_override(tmp_path):
    ini = tmp_path / "run.ini"
    ini.write_text("[model]\nwidth = 6\nlayers = 2\n[train]\niters = 2\nlr = 0.001\n")
    assert run(tmp_path, "cohort-train", "--config", str(ini), "--synth", "blobs", "--size", "8", "--count", "1",
               "--layers", "3", "--run-id", "cfg") == 0
    manifest = json.loads((tmp_path / "runs" / "cfg" / "manifest.json").read_text())
    assert manifest["config"]["width"] == 6 and manifest["config"]["layers"] == 3
    ck = load_checkpoint(tmp_path / "runs" / "cfg" / "checkpoints" / "cohort.ckpt")
    assert ck.depth == 3 and ck.meta["iterations"] == 2
    assert run(tmp_path, "rank", "--config", str(tmp_path / "nope.ini"), "--ckpt", "x") == 1
