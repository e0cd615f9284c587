import json
import time
from pathlib import Path

import numpy as np
import pytest

from dsraseg.cli import main
from dsraseg.synth import write_gray

NET = {"num_classes": 2, "height": 32, "width": 32, "stem_channels": 3,
       "encoder_channels": [4, 4, 5, 5], "decoder_channels": 4}


def files_of(directory: Path) -> dict[str, bytes]:
    return {str(p.relative_to(directory)): p.read_bytes() for p in sorted(directory.rglob("*")) if p.is_file()}


@pytest.fixture
def work(tmp_path, monkeypatch):
    cwd = tmp_path / "cwd"
    cwd.mkdir()
    monkeypatch.chdir(cwd)
    (tmp_path / "spec.json").write_text(json.dumps({"size": 32, "num_classes": 2, "count": 16, "seed": 3}))
    cfg = {"network": NET, "train": {"epochs": 2, "batch_size": 4, "lr": 1e-3}}
    (tmp_path / "cfg.json").write_text(json.dumps(cfg))
    yield tmp_path
    # nothing may land outside --out
    assert list(cwd.iterdir()) == []


def synth(work, out="data", *extra):
    return main(["synth", "--spec", str(work / "spec.json"), "--out", str(work / out), *extra])


def test_synth_writes_dataset(work, capsys):
    assert synth(work) == 0
    text = capsys.readouterr().out
    assert "wrote 16 images" in text and "seed=3" in text
    assert (work / "data" / "manifest.json").exists()
    assert len(list((work / "data" / "images").iterdir())) == 16
    assert len(list((work / "data" / "labels").iterdir())) == 16


def test_synth_is_idempotent_and_seed_override_echoes(work, capsys):
    synth(work, "a")
    synth(work, "b")
    assert files_of(work / "a") == files_of(work / "b")
    capsys.readouterr()
    synth(work, "c", "--seed", "11")
    assert "seed=11" in capsys.readouterr().out
    assert json.loads((work / "c" / "manifest.json").read_text())["spec"]["seed"] == 11


def test_synth_bad_spec_is_config_error(work, capsys):
    (work / "spec.json").write_text(json.dumps({"size": 33}))
    assert synth(work) == 2
    assert "config error" in capsys.readouterr().err
    (work / "spec.json").write_text(json.dumps({"sides": 3}))
    assert synth(work) == 2
    (work / "spec.json").write_text("{not json")
    assert synth(work) == 2


def train_cmd(work, out, *extra):
    return main(["train", "--config", str(work / "cfg.json"), "--data", str(work / "data"),
                 "--out", str(work / out), "--threads", "1", *extra])


def test_train_smoke_and_reproducibility(work):
    synth(work)
    t0 = time.perf_counter()
    assert train_cmd(work, "r1") == 0
    assert time.perf_counter() - t0 < 300
    for name in ("run_record.json", "run_record.csv", "config.json", "checkpoints/last/manifest.json",
                 "checkpoints/best/manifest.json"):
        assert (work / "r1" / name).exists()
    assert train_cmd(work, "r2") == 0
    a, b = files_of(work / "r1"), files_of(work / "r2")
    a.pop("timing.json"), b.pop("timing.json")
    assert a == b


def test_train_resume_is_bitwise_consistent(work):
    synth(work)
    assert train_cmd(work, "full", "--epochs", "3") == 0
    assert train_cmd(work, "part", "--epochs", "2") == 0
    assert train_cmd(work, "part", "--epochs", "3", "--resume", str(work / "part" / "checkpoints" / "last")) == 0
    assert files_of(work / "full" / "checkpoints" / "last") == files_of(work / "part" / "checkpoints" / "last")
    assert (work / "full" / "run_record.json").read_bytes() == (work / "part" / "run_record.json").read_bytes()


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_train_nan_exits_numeric_with_diagnostics(work, capsys):
    synth(work)
    assert train_cmd(work, "nan", "--lr", "1e300", "--epochs", "3") == 4
    err = capsys.readouterr().err
    assert "numeric failure" in err and "diagnostics" in err
    assert list((work / "nan" / "diagnostics").glob("step_*.json"))


def test_train_config_errors(work):
    synth(work)
    cfg = json.loads((work / "cfg.json").read_text())
    cfg["network"]["num_classes"] = 3
    (work / "cfg.json").write_text(json.dumps(cfg))
    assert train_cmd(work, "x") == 2
    cfg["network"]["num_classes"] = 2
    cfg["optimizer"] = {}
    (work / "cfg.json").write_text(json.dumps(cfg))
    assert train_cmd(work, "x") == 2


def test_missing_data_is_data_error(work):
    assert train_cmd(work, "x") == 3


def test_thread_env_var(work, monkeypatch):
    monkeypatch.setenv("DSRASEG_THREADS", "many")
    assert synth(work) == 2
    monkeypatch.setenv("DSRASEG_THREADS", "1")
    assert synth(work) == 0


def test_eval_identical_dirs_scores_perfect(work, capsys):
    for d in ("pred", "gt"):
        (work / d).mkdir()
    rng = np.random.default_rng(0)
    for i in range(3):
        m = np.zeros((16, 16), int)
        m[rng.integers(0, 8):12, 2:rng.integers(6, 16)] = 255
        write_gray(work / "pred" / f"im{i}.png", m)
        write_gray(work / "gt" / f"im{i}.png", m)
    args = ["eval", "--pred", str(work / "pred"), "--gt", str(work / "gt"), "--out", str(work / "ev")]
    assert main(args) == 0
    row = (work / "ev" / "metrics.csv").read_text().splitlines()[-1]
    # the alignment term divides by N-1, so a perfect map sits a hair above 100
    assert row.startswith("mean,100.00,100.00,100.00,100.00,100.") and row.endswith(",0.0000")
    header = (work / "ev" / "metrics.csv").read_text().splitlines()[0]
    assert header == "image,mDice,mIoU,wFm,S-m,mEm,MAE"


def test_eval_lists_missing_pairs(work, capsys):
    for d in ("pred", "gt"):
        (work / d).mkdir()
    write_gray(work / "gt" / "a.png", np.zeros((4, 4)))
    write_gray(work / "gt" / "b.png", np.zeros((4, 4)))
    write_gray(work / "pred" / "a.png", np.zeros((4, 4)))
    write_gray(work / "pred" / "c.png", np.zeros((4, 4)))
    assert main(["eval", "--pred", str(work / "pred"), "--gt", str(work / "gt"), "--out", str(work / "ev")]) == 3
    err = capsys.readouterr().err
    assert "no prediction for: b" in err and "no ground truth for: c" in err


def test_eval_modes_agree(work):
    synth(work)
    train_cmd(work, "run")
    ck = str(work / "run" / "checkpoints" / "last")
    assert main(["eval", "--checkpoint", ck, "--data", str(work / "data"), "--split", "all",
                 "--out", str(work / "e1")]) == 0
    assert main(["eval", "--pred", str(work / "e1" / "predictions"), "--gt", str(work / "data" / "labels"),
                 "--mode", "multiclass", "--classes", "2", "--out", str(work / "e2")]) == 0
    a = (work / "e1" / "metrics.csv").read_text()
    assert a == (work / "e2" / "metrics.csv").read_text()
    assert a.splitlines()[0].endswith(",MAE,HD95")


def test_eval_argument_errors(work):
    assert main(["eval", "--pred", "x", "--out", str(work / "ev")]) == 2
    assert main(["eval", "--pred", "x", "--gt", "y", "--checkpoint", "z", "--out", str(work / "ev")]) == 2


def test_gradcheck_command(work, capsys):
    out = work / "gc"
    assert main(["gradcheck", "--size", "32", "--classes", "2", "--max-entries", "3", "--out", str(out)]) == 0
    text = capsys.readouterr().out
    assert "PASS" in text and "dsra1" in text and "enc.b0" in text
    report = json.loads((out / "gradcheck.json").read_text())
    assert report["passed"] and len(report["groups"]) == 9


def test_ablate_command(work, capsys):
    cfg = {"network": NET, "train": {"epochs": 1, "batch_size": 4, "lr": 1e-3},
           "synth": {"size": 32, "num_classes": 2, "count": 8, "seed": 1}, "split": [0.75, 0.25, 0.0]}
    (work / "abl.json").write_text(json.dumps(cfg))
    code = main(["ablate", "--config", str(work / "abl.json"), "--seeds", "2", "--out", str(work / "ab")])
    assert code in (0, 1)
    rows = (work / "ab" / "ablation.csv").read_text().splitlines()
    assert len(rows) == 1 + 4 * 2
    assert "BCE+CE+Dice" in capsys.readouterr().out


def test_shipped_reference_config_matches_code(work):
    from dsraseg.cli import parse_run_config, read_json
    from dsraseg.synth import load_dataset, reference_dataset
    from dsraseg.train import reference_configs

    root = Path(__file__).resolve().parents[1] / "configs"
    assert parse_run_config(read_json(root / "reference.json")) == reference_configs()
    assert main(["synth", "--spec", str(root / "reference_data.json"), "--out", str(work / "ref")]) == 0
    ours, ref = load_dataset(work / "ref"), reference_dataset()
    assert np.array_equal(ours.images, ref.images) and np.array_equal(ours.labels, ref.labels)
    assert ours.splits == ref.splits
