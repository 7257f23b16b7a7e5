import hashlib
import json

import numpy as np
import pytest

from poselift import cli
from poselift.synthdata import read_dataset
from poselift.trainpipe import TrainLog


def _run(capsys, *argv):
    code = cli.main([str(a) for a in argv])
    out, err = capsys.readouterr()
    return code, out, err


def _sha(path):
    return hashlib.sha256(open(path, "rb").read()).hexdigest()


@pytest.fixture(scope="module")
def data(tmp_path_factory):
    path = tmp_path_factory.mktemp("d") / "small.plds"
    assert cli.main(["generate", "--count", "90", "--seed", "5", "--heldout", "30", "--out", str(path)]) == 0
    return path


@pytest.fixture(scope="module")
def run_dir(tmp_path_factory, data):
    out = tmp_path_factory.mktemp("run")
    assert cli.main(["train", "--data", str(data), "--out", str(out), "--toy", "--epochs1", "2",
                     "--epochs2", "1", "--batch-size", "30"]) == 0
    return out


def test_generate_is_reproducible(tmp_path, capsys):
    a, b = tmp_path / "a.plds", tmp_path / "b.plds"
    assert _run(capsys, "generate", "--count", 12, "--seed", 2, "--out", a)[0] == 0
    assert _run(capsys, "generate", "--count", 12, "--seed", 2, "--out", b)[0] == 0
    assert _sha(a) == _sha(b)
    man = json.load(open(str(a) + ".manifest.json"))
    assert man["subcommand"] == "generate" and man["config"]["data"]["count"] == 12
    assert {"started", "finished", "version", "artifacts", "seed"} <= set(man)


def test_generate_default_header(tmp_path, capsys):
    code, out, _ = _run(capsys, "generate", "--count", 7, "--out", tmp_path / "h.plds")
    assert code == 0
    assert json.loads(out)["header"] == [17, 16, 12, 32, 256, 192, 7]


def test_generate_zero_count_is_usage_error(tmp_path, capsys):
    code, _, err = _run(capsys, "generate", "--count", 0, "--out", tmp_path / "z.plds")
    assert code == 2
    assert json.loads(err.strip())["error"] == "usage"


def test_unknown_flag_exits_2(capsys):
    with pytest.raises(SystemExit) as e:
        cli.main(["generate", "--bogus"])
    assert e.value.code == 2
    assert json.loads(capsys.readouterr().err.strip())["error"] == "usage"


def test_config_file_below_flags(tmp_path, capsys):
    conf = tmp_path / "c.json"
    conf.write_text(json.dumps({"data": {"count": 9, "seed": 4}, "synth": {"clutter_amp": 0.0}}))
    out = tmp_path / "c.plds"
    assert _run(capsys, "generate", "--config", conf, "--count", 6, "--out", out)[0] == 0
    man = json.load(open(str(out) + ".manifest.json"))
    assert man["config"]["data"] == {"count": 6, "seed": 4, "heldout": None}
    assert man["config"]["synth"]["clutter_amp"] == 0.0
    assert read_dataset(out).count == 6


def test_train_rejects_bad_retention(data, tmp_path, capsys):
    with pytest.raises(SystemExit) as e:
        cli.main(["train", "--data", str(data), "--out", str(tmp_path), "--r", "1.5"])
    assert e.value.code == 2


def test_train_missing_data_is_runtime_error(tmp_path, capsys):
    code, _, err = _run(capsys, "train", "--data", tmp_path / "nope.plds", "--out", tmp_path / "r")
    assert code == 1
    assert json.loads(err.strip())["error"] == "runtime"


def test_train_outputs(run_dir):
    man = json.load(open(run_dir / "manifest.json"))
    assert man["config"]["train"]["mode"] == "progressive"
    assert man["config"]["model"]["r"] == 0.3
    log = TrainLog.read(run_dir / "trainlog.jsonl")
    assert len(log.records) == 3
    assert (run_dir / "model.ckpt").exists()


def test_replay_from_manifest(data, run_dir, tmp_path, capsys):
    out = tmp_path / "replay"
    code, _, _ = _run(capsys, "train", "--data", data, "--out", out, "--config", run_dir / "manifest.json")
    assert code == 0
    a = TrainLog.read(run_dir / "trainlog.jsonl").column("train_loss")
    b = TrainLog.read(out / "trainlog.jsonl").column("train_loss")
    assert np.abs(np.array(a) - np.array(b)).max() <= 1e-12
    assert _sha(run_dir / "model.ckpt") == _sha(out / "model.ckpt")


def test_eval_reproduces_logged_mpjpe(data, run_dir, capsys):
    code, out, _ = _run(capsys, "eval", "--ckpt", run_dir / "model.ckpt", "--data", data)
    assert code == 0
    logged = TrainLog.read(run_dir / "trainlog.jsonl").records[-1].mpjpe_heldout
    assert abs(json.loads(out)["mpjpe"] - logged) < 1e-9


def test_eval_protocol2(data, run_dir, tmp_path, capsys):
    stem = tmp_path / "rep"
    code, out, _ = _run(capsys, "eval", "--ckpt", run_dir / "model.ckpt", "--data", data, "--protocol", 2,
                        "--out", stem)
    res = json.loads(out)
    assert code == 0 and res["p_mpjpe"] <= res["mpjpe"]
    report = json.load(open(str(stem) + ".json"))
    assert report["pck_threshold"] == 150.0


def test_analyze(data, run_dir, tmp_path, capsys):
    out = tmp_path / "an"
    code, text, _ = _run(capsys, "analyze", "--ckpt", run_dir / "model.ckpt", "--data", data, "--out", out,
                         "--exports", 2)
    res = json.loads(text)
    assert code == 0
    assert 0.0 <= res["background"] <= 1.0
    assert res["structure_shape"] == [17, 18]
    assert res["exports"]["retained_000"] == 58
    assert np.loadtxt(out / "structure.txt").shape == (17, 18)


def test_ablate_rows(data, tmp_path, capsys):
    table = tmp_path / "r.tsv"
    code, out, _ = _run(capsys, "ablate", "--axis", "r", "--data", data, "--out", table,
                        "--epochs1", 1, "--epochs2", 1)
    assert code == 0
    lines = table.read_text().strip().splitlines()
    assert len(lines) == 1 + 3
    assert [ln.split("\t")[1] for ln in lines[1:]] == ["0.01", "0.3", "1.0"]
