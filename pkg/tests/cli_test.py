"""Tests for the command line workflow on a tiny synthetic dataset"""

import json

import pandas as pd
import pytest

from src.cli import RECORD_FILE, main
from src.manifest import DATASET_ROOT_ENV

TINY_DATASET = {
    "source": "synthetic",
    "n_points": 32,
    "synthetic_train_per_class": 6,
    "synthetic_test_per_class": 3,
}
TINY_TRAIN = {"regime": "student_ce", "epochs": 1, "batch_size": 8}


@pytest.fixture
def manifest_path(tmp_path, monkeypatch):
    monkeypatch.delenv(DATASET_ROOT_ENV, raising=False)
    path = tmp_path / "tiny.json"
    path.write_text(
        json.dumps(
            {
                "name": "tiny",
                "output_dir": str(tmp_path / "runs"),
                "dataset": TINY_DATASET,
                "train": TINY_TRAIN,
                "eval": {"embedding_samples": 20},
            }
        ),
        encoding="utf-8",
    )
    return path


def run(*args) -> int:
    return main([str(a) for a in args])


def test_prepare_prints_counts(manifest_path, capsys):
    """prepare reports partition sizes"""
    assert run("prepare", "--manifest", manifest_path) == 0

    out = capsys.readouterr().out
    assert "closed_train=24" in out
    assert "closed_test=12" in out
    assert "open_test=6" in out
    assert "pseudo_open_train=9" in out


def test_prepare_refuses_rerun_without_force(manifest_path, capsys):
    """Existing caches are kept unless --force is given"""
    assert run("prepare", "--manifest", manifest_path) == 0

    assert run("prepare", "--manifest", manifest_path) == 1
    assert "--force" in capsys.readouterr().err
    assert run("prepare", "--manifest", manifest_path, "--force") == 0


def write_manifest(tmp_path, name, dataset, mix=None):
    body = {
        "name": name,
        "output_dir": str(tmp_path / "runs"),
        "dataset": dataset,
        "train": TINY_TRAIN,
        "eval": {"embedding_samples": 20},
    }
    if mix is not None:
        body["mix"] = mix
    path = tmp_path / f"{name}.json"
    path.write_text(json.dumps(body), encoding="utf-8")
    return path


def test_manifests_with_different_datasets_keep_separate_caches(
    tmp_path, monkeypatch, capsys
):
    """A second dataset in the same output dir gets its own split"""
    monkeypatch.delenv(DATASET_ROOT_ENV, raising=False)
    small = write_manifest(tmp_path, "small", TINY_DATASET)
    wide = write_manifest(
        tmp_path,
        "wide",
        TINY_DATASET | {"n_points": 16, "synthetic_train_per_class": 4},
        mix={"rng_seed": 5},
    )

    assert run("prepare", "--manifest", small) == 0
    assert run("prepare", "--manifest", wide) == 0
    out = capsys.readouterr().out.splitlines()

    assert "closed_train=24" in out[0]
    assert "closed_train=16" in out[1]
    assert "pseudo_open_train=6" in out[1]
    assert run("train", "--manifest", small) == 0
    assert run("train", "--manifest", wide) == 0
    caches = sorted(p.name for p in (tmp_path / "runs" / "cache").iterdir())
    assert len(caches) == 2


def test_new_mix_reuses_sampled_split(tmp_path, monkeypatch):
    """Changing only the mix regenerates pseudo samples, not the clouds"""
    monkeypatch.delenv(DATASET_ROOT_ENV, raising=False)
    first = write_manifest(tmp_path, "first", TINY_DATASET)
    remixed = write_manifest(tmp_path, "remixed", TINY_DATASET, mix={"rng_seed": 3})
    assert run("prepare", "--manifest", first) == 0
    (split_file,) = (tmp_path / "runs" / "cache").glob("*/split.bin")
    before = split_file.read_bytes()

    assert run("prepare", "--manifest", remixed) == 0

    assert split_file.read_bytes() == before
    assert len(list(split_file.parent.glob("pseudo_open-*.bin"))) == 2


def test_missing_dataset_root(tmp_path, monkeypatch, capsys):
    """A modelnet manifest without a usable root exits with an error"""
    monkeypatch.delenv(DATASET_ROOT_ENV, raising=False)
    path = tmp_path / "m.json"
    path.write_text(
        json.dumps(
            {
                "name": "m",
                "output_dir": str(tmp_path / "runs"),
                "dataset": {"root": str(tmp_path / "no_such_root")},
            }
        ),
        encoding="utf-8",
    )

    assert run("prepare", "--manifest", path) == 1
    assert "no_such_root" in capsys.readouterr().err


def test_train_before_prepare(manifest_path, capsys):
    """train names the prepare command when caches are missing"""
    assert run("train", "--manifest", manifest_path) == 1

    assert "python -m src prepare" in capsys.readouterr().err


def test_eval_without_checkpoint(manifest_path, capsys):
    """eval names the train command when no checkpoint exists"""
    run("prepare", "--manifest", manifest_path)

    assert run("eval", "--manifest", manifest_path) == 1
    assert "python -m src train" in capsys.readouterr().err


def test_busy_output_directory(manifest_path, tmp_path, capsys):
    """A held lock makes commands fail fast"""
    (tmp_path / "runs").mkdir()
    (tmp_path / "runs" / ".lock").write_text("{}")

    assert run("prepare", "--manifest", manifest_path) == 1
    assert "busy" in capsys.readouterr().err


def test_full_workflow(manifest_path, tmp_path):
    """prepare, train, eval and report leave records, predictions and tables"""
    for command in ("prepare", "train", "eval", "report"):
        assert run(command, "--manifest", manifest_path) == 0, command

    run_dir = tmp_path / "runs" / "tiny" / "seed0"
    record = json.loads((run_dir / RECORD_FILE).read_text().splitlines()[0])
    assert record["regime"] == "student_ce"
    assert record["metrics"]["n_open"] == 6
    assert len(pd.read_csv(run_dir / "predictions.csv")) == 18
    assert len(pd.read_csv(run_dir / "thresholds.csv")) == 10
    assert (run_dir / "steps.jsonl").read_text().count("\n") == 3
    assert set(pd.read_csv(run_dir / "latent_separation.csv")["reference"]) == {
        "open_test",
        "pseudo_open",
    }
    reports = tmp_path / "runs" / "reports"
    assert (reports / "table1.csv").exists()
    assert (reports / "table2.csv").exists()
    assert (reports / "latent_tiny_seed0.png").exists()


def test_train_refuses_existing_checkpoint(manifest_path):
    """A trained run is not overwritten without --force"""
    run("prepare", "--manifest", manifest_path)
    assert run("train", "--manifest", manifest_path) == 0

    assert run("train", "--manifest", manifest_path) == 1
    assert run("train", "--manifest", manifest_path, "--force") == 0


def test_seed_override_uses_own_run_dir(manifest_path, tmp_path):
    """--seed trains into seed<N>"""
    run("prepare", "--manifest", manifest_path)

    assert run("train", "--manifest", manifest_path, "--seed", 4) == 0
    assert (tmp_path / "runs" / "tiny" / "seed4" / "checkpoint.pt").exists()


def test_sweep_writes_records_and_plot(manifest_path, tmp_path):
    """One record per swept value plus the sweep plot"""
    run("prepare", "--manifest", manifest_path)

    assert (
        run(
            "sweep",
            "--manifest",
            manifest_path,
            "--parameter",
            "loss.tau_kd",
            "--values",
            1,
            2,
        )
        == 0
    )

    run_dir = tmp_path / "runs" / "tiny" / "seed0"
    lines = (run_dir / "sweep_loss_tau_kd.jsonl").read_text().splitlines()
    assert [json.loads(line)["sweep_value"] for line in lines] == [1.0, 2.0]
    assert (run_dir / "sweep_loss_tau_kd.png").exists()
    assert (run_dir / "sweep_loss_tau_kd" / "2" / "checkpoint.pt").exists()


def test_sweep_needs_parameter(manifest_path, capsys):
    """Without a sweep section the parameter must be given"""
    run("prepare", "--manifest", manifest_path)

    assert run("sweep", "--manifest", manifest_path) == 1
    assert "--parameter" in capsys.readouterr().err
