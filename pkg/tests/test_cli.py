import json

import pytest

from iodcnn import network as N
from iodcnn.cli import main

CFG = """
seed = 3
[network]
fc6_dim = 32
fc7_dim = 16
[pretrain]
count = 8
batch_size = 4
[stages.pretrain]
base_lr = 0.01
iterations = 3
step_size = 3
active_heads = ["scene"]
[stages.rigid_only]
base_lr = 0.01
iterations = 2
step_size = 2
active_heads = ["rigid"]
[stages.unified]
base_lr = 0.0001
iterations = 2
step_size = 2
"""


@pytest.fixture(scope="module")
def trained(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    assert main(["synth", "--count", "6", "--seed", "1", "--out", str(root / "data")]) == 0
    (root / "cfg.toml").write_text(CFG)
    assert main(["train", "--config", str(root / "cfg.toml"), "--data", str(root / "data"),
                 "--out", str(root / "run")]) == 0
    return root


def test_train_outputs(trained):
    run = trained / "run"
    index = json.loads((run / "stages.json").read_text())
    assert [s["stage"] for s in index] == ["pretrain", "rigid_only", "unified"]
    assert (run / "train_log.csv").read_text().startswith("iter,stage,lr")
    assert sorted(p.name for p in run.iterdir()) == ["stage1", "stage2", "stage3", "stages.json", "train_log.csv"]
    assert set(N.load(run / "stage3").params) >= set(N.head_param_paths("nonrigid"))


def test_eval_report(trained, capsys):
    rep = trained / "report.json"
    assert main(["eval", "--checkpoint", str(trained / "run" / "stage3"), "--data", str(trained / "data"),
                 "--report", str(rep), "--scores", str(trained / "s.csv")]) == 0
    doc = json.loads(rep.read_text())
    assert {"ap_event", "map_rigid", "ap_nonrigid"} <= set(doc)
    assert 0 <= doc["ap_event"] <= 1
    assert (trained / "s.csv").exists()


def test_fuse_both_modes(trained):
    d, ck = str(trained / "data"), str(trained / "run" / "stage3")
    main(["eval", "--checkpoint", ck, "--data", d, "--report", str(trained / "r.json"),
          "--scores", str(trained / "a.csv")])
    out = trained / "fs.json"
    assert main(["fuse", "--mode", "score", "--data", d, "--report", str(out),
                 "--scores", str(trained / "a.csv"), str(trained / "a.csv"), "--search"]) == 0
    doc = json.loads(out.read_text())
    assert doc["ap_fused"] == pytest.approx(doc["ap_models"][0])
    assert main(["fuse", "--mode", "feature", "--data", d, "--report", str(out), "--checkpoint", ck,
                 "--epochs", "20"]) == 0
    assert 0 <= json.loads(out.read_text())["ap_fused"] <= 1


def test_infer(trained, capsys):
    assert main(["infer", "--checkpoint", str(trained / "run" / "stage3"),
                 "--image", str(trained / "data" / "img_00000.png")]) == 0
    doc = json.loads(capsys.readouterr().out.strip().splitlines()[-1])
    assert doc["benign"] + doc["malicious"] == pytest.approx(1.0, abs=1e-6)


def test_usage_errors(tmp_path, trained):
    assert main(["train", "--bogus"]) == 1
    assert main(["nope"]) == 1
    assert main(["eval", "--checkpoint", str(tmp_path / "missing"), "--data", str(trained / "data"),
                 "--report", str(tmp_path / "r.json")]) == 1
    (tmp_path / "bad").write_bytes(b"IODC" + bytes(20))
    assert main(["infer", "--checkpoint", str(tmp_path / "bad"), "--image", "x.png"]) == 1
    (tmp_path / "cfg.toml").write_text("[network]\nbogus = 1\n")
    assert main(["train", "--config", str(tmp_path / "cfg.toml"), "--data", str(trained / "data"),
                 "--out", str(tmp_path / "o")]) == 1
    assert not (tmp_path / "r.json").exists()


def test_fuse_weights_must_sum_to_one(trained, tmp_path):
    main(["eval", "--checkpoint", str(trained / "run" / "stage3"), "--data", str(trained / "data"),
          "--report", str(tmp_path / "r.json"), "--scores", str(tmp_path / "a.csv")])
    assert main(["fuse", "--data", str(trained / "data"), "--report", str(tmp_path / "f.json"),
                 "--scores", str(tmp_path / "a.csv"), str(tmp_path / "a.csv"), "--weights", "0.7", "0.7"]) == 1


def test_gradcheck_subset(capsys):
    assert main(["gradcheck", "--seeds", "2", "--only", "relu", "softmax_cross_entropy"]) == 0
    out = capsys.readouterr().out
    assert out.count("PASS") == 2
    assert main(["gradcheck", "--only", "nope"]) == 1


def test_no_temp_files_left(trained):
    leftovers = [p for p in trained.rglob("*") if ".tmp" in p.name or p.name.startswith(".")]
    assert not leftovers
