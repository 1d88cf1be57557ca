import json
import os
import subprocess
import sys

import numpy as np
import pytest

from voxmem.cli import main
from voxmem.voxels import VoxelGrid, write_voxf

TINY = ["--set", "n_train=24", "--set", "n_test=6", "--set", "n_prototypes=8", "--set", "r_v=8",
        "--set", "r_i=12", "--set", "n_k=16", "--set", "n_e=8", "--set", "n_h=12",
        "--set", "encoder_hidden=24", "--set", "decoder_hidden=32", "--set", "capacity=16",
        "--set", "epochs=2", "--set", "batch_size=4", "--set", "n_points=512"]


def run(argv, capsys):
    code = main(argv)
    out, err = capsys.readouterr()
    return code, [json.loads(line) for line in out.splitlines() if line.strip()], err


@pytest.fixture(scope="module")
def workspace(tmp_path_factory):
    """One tiny corpus and one trained run shared by the CLI tests."""
    root = tmp_path_factory.mktemp("cli")
    assert main(["gen-data", "--out", str(root / "data"), "--seed", "7"] + TINY) == 0
    assert main(["train", "--data", str(root / "data"), "--out", str(root / "run")] + TINY) == 0
    return root


def test_gen_data_twice_gives_identical_hash(tmp_path, capsys):
    hashes = []
    for name in ("a", "b"):
        code, lines, _ = run(["gen-data", "--out", str(tmp_path / name), "--seed", "7"] + TINY, capsys)
        assert code == 0 and lines[-1]["near_duplicates_ok"]
        hashes.append(lines[-1]["corpus_hash"])
    assert hashes[0] == hashes[1]


def test_train_writes_run_directory(workspace):
    run_dir = workspace / "run"
    for name in ("config.ini", "weights.vmwt", "memory.vmem", "memory.counts.json", "train_report.jsonl",
                 "train_steps.jsonl", "figures/losses.png", "figures/retrieval.png"):
        assert (run_dir / name).exists(), name
    steps = [json.loads(ln) for ln in (run_dir / "train_steps.jsonl").read_text().splitlines()]
    assert all(s["l_total"] == s["l_t"] + s["l_r"] for s in steps)


def test_eval_report_and_figure(workspace, capsys):
    out = workspace / "eval.jsonl"
    code, lines, _ = run(["eval", "--run", str(workspace / "run"), "--data", str(workspace / "data"),
                          "--out", str(out)], capsys)
    assert code == 0
    records = [json.loads(ln) for ln in out.read_text().splitlines()]
    assert records[0]["record"] == "header" and records[-1]["record"] == "summary"
    assert sum(r["record"] == "item" for r in records) == 6
    assert not any(k.startswith("l_") for r in records for k in r)
    assert (workspace / "figures" / "iou_test-occluded.png").exists()
    assert lines[-1]["event"] == "eval"


def test_eval_without_snapshot_is_config_error(workspace, tmp_path, capsys):
    run_dir = tmp_path / "run"
    run_dir.mkdir()
    for name in ("config.ini", "weights.vmwt"):
        (run_dir / name).write_bytes((workspace / "run" / name).read_bytes())
    code, _, err = run(["eval", "--run", str(run_dir), "--data", str(workspace / "data")], capsys)
    assert code == 1 and err.startswith("error:") and len(err.strip().splitlines()) == 1


def test_reconstruct_writes_grid_and_mesh(workspace, tmp_path, capsys):
    code, lines, _ = run(["reconstruct", "--run", str(workspace / "run"),
                          "--image", str(workspace / "data" / "test-clean" / "0000.imgf"),
                          "--out", str(tmp_path / "p.voxf"), "--obj", str(tmp_path / "p.obj")], capsys)
    assert code == 0 and (tmp_path / "p.voxf").exists()
    assert lines[-1]["event"] == "reconstruct"


def test_mem_inspect(workspace, tmp_path, capsys):
    code, lines, _ = run(["mem-inspect", "--run", str(workspace / "run"),
                          "--figure", str(tmp_path / "m.png")], capsys)
    assert code == 0 and lines[0]["event"] == "mem-inspect"
    assert len(lines) == 1 + lines[0]["count"]
    assert all(ln["write_count"] >= 1 for ln in lines[1:])
    assert (tmp_path / "m.png").exists()


def test_export_mesh(tmp_path, capsys):
    v = np.zeros((8, 8, 8))
    v[2:6, 2:6, 2:6] = 1.0
    write_voxf(tmp_path / "g.voxf", VoxelGrid(v))
    code, lines, _ = run(["export-mesh", "--grid", str(tmp_path / "g.voxf"), "--out", str(tmp_path / "g.obj")],
                         capsys)
    assert code == 0 and lines[0]["euler_characteristic"] == 2


def test_export_mesh_empty_grid_fails(tmp_path, capsys):
    write_voxf(tmp_path / "z.voxf", VoxelGrid.zeros(6))
    code, _, err = run(["export-mesh", "--grid", str(tmp_path / "z.voxf"), "--out", str(tmp_path / "z.obj")],
                       capsys)
    assert code != 0 and "surface" in err


def test_unknown_key_exits_1(tmp_path, capsys):
    code, _, err = run(["gen-data", "--out", str(tmp_path / "d"), "--set", "no_such_key=1"], capsys)
    assert code == 1 and "no_such_key" in err


def test_missing_file_exits_2(tmp_path, capsys):
    code, _, err = run(["export-mesh", "--grid", str(tmp_path / "absent.voxf"), "--out", str(tmp_path / "o")],
                       capsys)
    assert code == 2 and len(err.strip().splitlines()) == 1


def test_corrupt_file_exits_2(tmp_path, capsys):
    (tmp_path / "bad.voxf").write_bytes(b"garbage")
    code, _, _ = run(["export-mesh", "--grid", str(tmp_path / "bad.voxf"), "--out", str(tmp_path / "o")], capsys)
    assert code == 2


def test_ablate_one_cell(workspace, tmp_path, capsys):
    code, lines, _ = run(["ablate", "--data", str(workspace / "data"), "--out", str(tmp_path),
                          "--cells", "full", "--seeds", "0", "--no-fscore"] + TINY, capsys)
    assert code == 0
    rows = [json.loads(ln) for ln in (tmp_path / "ablation.jsonl").read_text().splitlines()]
    assert [r["cell"] for r in rows if r["record"] == "cell"] == ["full"]
    assert (tmp_path / "figures" / "ablation_iou.png").exists()
    assert lines[-1]["event"] == "ablation-cell"


def test_console_usage_error_exits_1():
    proc = subprocess.run([sys.executable, "-m", "voxmem", "train"], capture_output=True, text=True,
                          env=dict(os.environ))
    assert proc.returncode == 1 and "error:" in proc.stderr
