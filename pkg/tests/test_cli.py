import json
import subprocess
import sys
from pathlib import Path

import pytest

from mftcnet.cli import Config, load_config, main
from mftcnet.config import from_dict, to_dict
from mftcnet.trainer import load_checkpoint

SMALL_PHANTOM = ["--set", "phantom.shape=[20,20,20]", "--set", "phantom.num_organs=2", "--set", "phantom.semi_axis_range=[3,5]"]
SMALL_TRAIN = [
    "--set", "train.model.apertures=2",
    "--set", "train.model.input_size=16",
    "--set", "train.model.num_classes=3",
    "--set", "train.epochs=2",
    "--set", "train.patches_per_epoch=2",
    "--set", "train.folds=2",
]


def files(d):
    return {p.name: p.read_bytes() for p in sorted(Path(d).iterdir())}


@pytest.fixture(scope="module")
def dataset(tmp_path_factory):
    out = tmp_path_factory.mktemp("data")
    assert main(["phantom", "--out", str(out), "--force", "--set", "n_cases=4"] + SMALL_PHANTOM) == 0
    return out


def test_phantom_contract(tmp_path):
    assert main(["phantom", "--out", str(tmp_path / "a"), "--seed", "3"] + SMALL_PHANTOM) == 0
    manifest = json.loads((tmp_path / "a" / "manifest.json").read_text())
    assert len(manifest["case_ids"]) == 5
    vols = sorted(p.stem for p in (tmp_path / "a").glob("*.vol"))
    lbls = sorted(p.stem for p in (tmp_path / "a").glob("*.lbl"))
    assert vols == lbls == sorted(manifest["case_ids"])
    assert main(["phantom", "--out", str(tmp_path / "b"), "--seed", "3"] + SMALL_PHANTOM) == 0
    assert files(tmp_path / "a") == files(tmp_path / "b")


def test_nonempty_out_requires_force(tmp_path):
    (tmp_path / "x").write_text("x")
    assert main(["phantom", "--out", str(tmp_path)] + SMALL_PHANTOM) == 2
    assert main(["phantom", "--out", str(tmp_path), "--force"] + SMALL_PHANTOM) == 0


def test_config_errors_exit_2(tmp_path, capsys):
    assert main(["phantom", "--out", str(tmp_path / "o"), "--set", "phantom.bogus=1"]) == 2
    assert "valid keys" in capsys.readouterr().err
    bad = tmp_path / "bad.json"
    bad.write_text(json.dumps({"train": {"nope": 1}}))
    assert main(["params", "--config", str(bad)]) == 2
    assert main(["params", "--set", "train.learning_rate=-1"]) == 2


def test_echoed_config_reparses(tmp_path):
    cfg_file = tmp_path / "c.json"
    cfg_file.write_text(json.dumps({"n_cases": 2, "phantom": {"shape": [20, 20, 20], "num_organs": 1}}))
    assert main(["phantom", "--config", str(cfg_file), "--out", str(tmp_path / "o"), "--seed", "9"]) == 0
    echoed = json.loads((tmp_path / "o" / "config.json").read_text())
    cfg = from_dict(Config, echoed)
    assert cfg == load_config(cfg_file, [], 9)
    assert cfg.phantom.seed == 9 and cfg.n_cases == 2


def test_params_increasing(capsys):
    assert main(["params", "--scale", "full"]) == 0
    lines = capsys.readouterr().out.strip().splitlines()[1:]
    counts = [int(l.split()[-1].replace(",", "")) for l in lines]
    assert len(counts) == 5 and all(a < b for a, b in zip(counts, counts[1:]))


def test_eval_pred_equals_gt(dataset, tmp_path):
    assert main(["eval", "--data", str(dataset), "--pred", str(dataset), "--out", str(tmp_path)]) == 0
    summary = json.loads((tmp_path / "summary.json").read_text())
    assert summary["mean_dice"] == 1.0 and summary["mean_hd95"] == 0.0
    assert (tmp_path / "metrics.csv").exists()


def test_train_then_eval_checkpoint(dataset, tmp_path):
    out = tmp_path / "run"
    assert main(["train", "--data", str(dataset), "--out", str(out)] + SMALL_TRAIN) == 0
    ck = load_checkpoint(out / "checkpoint")
    assert ck.epoch in (1, 2)
    assert len((out / "train_log.jsonl").read_text().splitlines()) == 2 * 2 + 2
    ev = tmp_path / "ev"
    assert main(["eval", "--data", str(dataset), "--checkpoint", str(out / "checkpoint"), "--out", str(ev)]) == 0
    assert len(list(ev.glob("*_metrics.json"))) == 4


def test_missing_checkpoint_exit_1(dataset, tmp_path):
    assert main(["eval", "--data", str(dataset), "--checkpoint", str(tmp_path / "none"), "--out", str(tmp_path / "o")]) == 1


def test_viz(dataset, tmp_path):
    assert main(["viz", str(dataset / "case_000"), "--out", str(tmp_path)]) == 0
    assert (tmp_path / "montage.png").exists()
    assert len(list(tmp_path.glob("class_*.obj"))) == 2


def test_console_entry_point():
    r = subprocess.run([sys.executable, "-m", "mftcnet.cli", "params"], capture_output=True, text=True)
    assert r.returncode == 0 and "T1+T2+T3+T4+Fusion" in r.stdout
