import json
import logging
import os

import pytest
import torch

from model_based_fss.cli import EXIT_OK, EXIT_USAGE, _overrides, build_parser, main
from model_based_fss.data import read_dataset, write_dataset
from model_based_fss.evalkit import power_residual
from model_based_fss.touchstone import read_touchstone
from model_based_fss.training import load_checkpoint

CONFIG = {
    "training": {"phase1_epochs": 20, "phase2_epochs": 2},
    "direct": {"epochs": 2, "hidden_sizes": [4, 8], "num_centers": 4},
    "compare": {"fractions": [0.5]},
}


@pytest.fixture
def workspace(tmp_path, small_dataset):
    config = tmp_path / "config.json"
    config.write_text(json.dumps(CONFIG))
    dataset = tmp_path / "dataset.json"
    write_dataset(small_dataset, str(dataset))
    return tmp_path


def run_train(workspace, out: str, *extra: str) -> int:
    return main(
        [
            "--config",
            str(workspace / "config.json"),
            "--out",
            str(workspace / out),
            "train",
            "--dataset",
            str(workspace / "dataset.json"),
            *extra,
        ]
    )


def test_gen_data(tmp_path, capsys):
    out = tmp_path / "data" / "dataset.json"
    argv = ["--out", str(out), "gen-data", "--levels", "2,2,2"]
    assert main(argv) == EXIT_OK
    assert "samples: 8" in capsys.readouterr().out
    dataset = read_dataset(str(out))
    assert len(dataset) == 8
    first = out.read_bytes()

    # Refuses to overwrite without --force, then reproduces the same bytes.
    assert main(argv) == EXIT_USAGE
    assert main(["--force", *argv]) == EXIT_OK
    assert out.read_bytes() == first


def test_gen_data_unperturbed(tmp_path):
    out = tmp_path / "dataset.json"
    assert main(["--out", str(out), "gen-data", "--levels", "1,1,2", "--unperturbed"]) == EXIT_OK
    dataset = read_dataset(str(out))
    assert dataset.spec.alpha == 0 and dataset.spec.second_resonance == 0
    assert max(sample.residual for sample in dataset.samples) < 1e-8


def test_bad_levels(tmp_path):
    with pytest.raises(SystemExit) as info:
        main(["--out", str(tmp_path / "d.json"), "gen-data", "--levels", "2,2"])
    assert info.value.code == 2


def test_train_usage_errors(workspace):
    assert run_train(workspace, "ck.json", "--phase", "2") == EXIT_USAGE
    assert not os.path.exists(workspace / "ck.json")
    missing = main(["--out", str(workspace / "ck.json"), "train", "--dataset", "nope.json"])
    assert missing == EXIT_USAGE


def test_train_phases_compose(workspace):
    assert run_train(workspace, "phase1.json", "--phase", "1") == EXIT_OK
    assert (
        run_train(workspace, "phase2.json", "--phase", "2", "--init", str(workspace / "phase1.json"))
        == EXIT_OK
    )
    assert run_train(workspace, "both.json", "--phase", "both") == EXIT_OK

    two_step = load_checkpoint(str(workspace / "phase2.json")).model
    both = load_checkpoint(str(workspace / "both.json")).model
    for p, q in zip(two_step.parameters(), both.parameters()):
        assert torch.equal(p, q)
    history = (workspace / "both_history.csv").read_text().splitlines()
    assert len(history) == 1 + 20 + 2


def test_train_loss_and_epochs_flags(workspace):
    assert run_train(workspace, "ck.json", "--loss", "eq5", "--epochs", "3") == EXIT_OK
    checkpoint = load_checkpoint(str(workspace / "ck.json"))
    assert checkpoint.config["training"]["phase2_loss"] == "eq5"
    assert checkpoint.config["training"]["phase1_epochs"] == 3
    assert checkpoint.config["phase"] == "both"


def test_predict(workspace, capsys, caplog):
    assert run_train(workspace, "ck.json", "--phase", "1") == EXIT_OK
    out = workspace / "prediction.s2p"
    argv = [
        "--out",
        str(out),
        "predict",
        "--checkpoint",
        str(workspace / "ck.json"),
        "--geometry",
        "14.8",
        "9.5",
        "14.8",
    ]
    assert main(argv) == EXIT_OK
    assert "L1 = " in capsys.readouterr().out
    response = read_touchstone(str(out))
    assert response.grid.n_points == 41
    assert power_residual(response) < 1e-10

    with caplog.at_level(logging.WARNING):
        argv[-3:] = ["16.0", "9.5", "14.8"]
        assert main(["--force", *argv]) == EXIT_OK
    assert "outside the sweep bounds" in caplog.text


def test_eval(workspace):
    assert run_train(workspace, "ck.json") == EXIT_OK
    out = workspace / "eval.json"
    argv = [
        "--config",
        str(workspace / "config.json"),
        "--out",
        str(out),
        "eval",
        "--checkpoint",
        str(workspace / "ck.json"),
        "--dataset",
        str(workspace / "dataset.json"),
    ]
    assert main(argv) == EXIT_OK
    document = json.loads(out.read_text())
    assert document["models"][0]["model"] == "model-based"
    assert document["models"][0]["num_params"] == 250


def test_compare(workspace, capsys):
    out_dir = workspace / "results"
    argv = [
        "--config",
        str(workspace / "config.json"),
        "--out",
        str(out_dir),
        "compare",
        "--dataset",
        str(workspace / "dataset.json"),
    ]
    assert main(argv) == EXIT_OK
    for name in (
        "report.json",
        "report.txt",
        "predictions.json",
        "phases.json",
        "generalization.csv",
        "generalization.json",
    ):
        assert (out_dir / name).exists()
    report = json.loads((out_dir / "report.json").read_text())
    assert [row["model"] for row in report["models"]] == ["model-based", "dnn", "dnn-tanh", "rbfn"]
    phases = json.loads((out_dir / "phases.json").read_text())
    assert phases["labels"] == ["phase1", "phase2-eq3", "phase2-eq5"]
    assert "model-based" in capsys.readouterr().out

    assert main(argv) == EXIT_USAGE
    assert main(["--force", *argv, "--fractions", "0.5,1.5"]) == EXIT_USAGE


def test_config_errors_exit_with_usage(workspace):
    config = workspace / "bad.json"
    config.write_text(json.dumps({"training": {"phase1_epochz": 1}}))
    argv = ["--config", str(config), "--out", str(workspace / "ck.json"), "train"]
    assert main(argv) == EXIT_USAGE


def test_loss_flag_routing():
    parser = build_parser()
    assert _overrides(parser.parse_args(["train", "--loss", "eq2-mae"])) == {
        "training": {"phase1_loss": "eq2-mae"}
    }
    assert _overrides(parser.parse_args(["--seed", "4", "train", "--loss", "eq1"])) == {
        "seed": 4,
        "training": {"phase2_loss": "eq1"},
    }
    with pytest.raises(SystemExit):
        parser.parse_args(["train", "--loss", "eq4"])


def test_version(capsys):
    with pytest.raises(SystemExit) as info:
        main(["--version"])
    assert info.value.code == 0
    assert capsys.readouterr().out.strip()
