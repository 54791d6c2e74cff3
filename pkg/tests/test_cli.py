import csv
import hashlib
import json

import pytest

from dethub.cli import main
from dethub.engine.ablation import TOY_OVERRIDES

TOY_SET = [arg for k, v in TOY_OVERRIDES.items() for arg in ("--set", f"{k}={v}")]


def _digest(root):
    h = hashlib.sha256()
    for p in sorted(root.rglob("*")):
        if p.is_file() and p.name != "manifest.json":
            h.update(str(p.relative_to(root)).encode())
            h.update(p.read_bytes())
    return h.hexdigest()


def _synth(out, *extra):
    assert main(["synth-data", "--out", str(out), "--num-images", "4", "--val-images", "2", *extra]) == 0


def test_synth_data_default_pair(tmp_path, capsys):
    _synth(tmp_path / "d")
    printed = json.loads(capsys.readouterr().out)
    assert printed["datasets"] == {"A": ["circle", "square"], "B": ["triangle", "box"]}
    for name in ("A", "B"):
        for split in ("train", "val"):
            assert (tmp_path / "d" / name / "annotations" / f"{split}.json").exists()
    assert (tmp_path / "d" / "manifest.json").exists()


def test_synth_data_reproducible(tmp_path):
    _synth(tmp_path / "x", "--seed", "7")
    _synth(tmp_path / "y", "--seed", "7")
    assert _digest(tmp_path / "x") == _digest(tmp_path / "y")


def test_synth_data_third_dataset(tmp_path, capsys):
    _synth(tmp_path / "d", "--datasets", "3")
    assert "ring" in json.loads(capsys.readouterr().out)["datasets"]["C"]


def test_output_root_env(tmp_path, monkeypatch):
    monkeypatch.setenv("DETHUB_OUTPUT_ROOT", str(tmp_path))
    _synth("rel")
    assert (tmp_path / "rel" / "A" / "annotations" / "train.json").exists()


@pytest.fixture(scope="module")
def trained(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    _synth(root / "data")
    run = root / "run"
    code = main(["train", "--dataset", str(root / "data" / "A"), "--dataset", str(root / "data" / "B"),
                 *TOY_SET, "--set", "train.steps=3", "--out", str(run)])
    assert code == 0
    return root, run


def test_train_then_eval(trained, capsys):
    root, run = trained
    assert (run / "config.yaml").exists() and (run / "metrics.jsonl").exists()
    out = root / "eval"
    code = main(["eval", "--checkpoint", str(run), "--dataset", str(root / "data" / "A"), "--out", str(out)])
    assert code == 0
    report = json.loads((out / "report-A.json").read_text())
    assert report["dataset"] == "A" and set(report["per_category"]) == {"circle", "square"}
    assert (out / "predictions-A.jsonl").exists()


def test_eval_embedder_mismatch_exit_code(trained, capsys):
    root, run = trained
    code = main(["eval", "--checkpoint", str(run), "--dataset", str(root / "data" / "A"),
                 "--set", "embedder.seed=5", "--out", str(root / "bad")])
    assert code == 2
    assert json.loads(capsys.readouterr().err)["error"] == "embedder-mismatch"


def test_unknown_key_and_missing_data(tmp_path, capsys):
    assert main(["train", "--set", "model.nope=1", "--out", str(tmp_path)]) == 2
    assert "unknown config key" in capsys.readouterr().err
    code = main(["train", "--dataset", str(tmp_path / "missing"), *TOY_SET, "--out", str(tmp_path / "r")])
    assert code == 3


def test_ablate_queries_grid(tmp_path, capsys):
    code = main(["ablate", "--grid", "queries", "--steps-per-dataset", "1", "--train-images", "2",
                 "--val-images", "1", "--out", str(tmp_path)])
    assert code == 0
    with open(tmp_path / "queries.csv", newline="") as f:
        rows = list(csv.DictReader(f))
    assert [r["row"] for r in rows] == ["100", "300"]
    assert all(r["status"] == "ok" for r in rows)
    assert (tmp_path / "queries.json").exists() and (tmp_path / "queries.png").exists()


def test_help_lists_every_key(capsys):
    with pytest.raises(SystemExit):
        main(["--help"])
    text = capsys.readouterr().out
    for key in ("queries.count", "adaptation.mode", "optimizer.milestones", "dyconv.kernel_size",
                "prompt.max_length", "sampler.balancing"):
        assert key in text


def test_plot_command(trained, capsys):
    root, run = trained
    out = root / "loss.png"
    assert main(["plot", "loss-curve", str(run / "metrics.jsonl"), "--out", str(out)]) == 0
    assert out.stat().st_size > 0
