import csv
import json

import numpy as np
import pytest
import torch

from model_based_fss.circuit import FrequencyGrid, SResponse
from model_based_fss.data import holdout, split
from model_based_fss.evalkit import (
    MODEL_BASED,
    CompareConfig,
    EvalReport,
    ModelReport,
    _train_and_predict,
    compare_models,
    generalization_curve,
    mae_complex,
    magnitude_mae,
    phase_predictions,
    power_residual,
    smoothness,
)
from model_based_fss.training import DirectConfig, TrainingConfig

GRID = FrequencyGrid(n_points=5)
FAST = TrainingConfig(phase1_epochs=20, phase2_epochs=2)
FAST_DIRECT = DirectConfig(epochs=5, hidden_sizes=(4, 8), num_centers=4)


def make_response(s11, s21, grid: FrequencyGrid = GRID) -> SResponse:
    s11 = torch.as_tensor(s11, dtype=torch.complex128)
    s21 = torch.as_tensor(s21, dtype=torch.complex128)
    top = torch.stack((s11, s21), dim=-1)
    bottom = torch.stack((s21, s11), dim=-1)
    return SResponse(grid, torch.stack((top, bottom), dim=-2))


def test_mae_metrics():
    target = make_response([0.0] * 5, [1.0] * 5)
    pred = make_response([0.1j] * 5, [-1.0] * 5)
    assert mae_complex(pred, target) == pytest.approx(2.0)
    assert mae_complex(pred, target, "s11") == pytest.approx(0.1)
    # Phase flips are invisible to magnitudes.
    assert magnitude_mae(pred, target) == pytest.approx(0.0)
    assert magnitude_mae(pred, target, "s11") == pytest.approx(0.1)
    with pytest.raises(ValueError):
        mae_complex(pred, target, "s12")
    with pytest.raises(ValueError):
        mae_complex(pred, make_response([0.0] * 3, [1.0] * 3, FrequencyGrid(n_points=3)))


def test_power_residual():
    assert power_residual(make_response([0.6] * 5, [0.8j] * 5)) == pytest.approx(0.0, abs=1e-15)
    assert power_residual(make_response([1.0] * 5, [1.0] * 5)) == pytest.approx(1.0)
    assert power_residual(make_response([0.0] * 5, [0.5] * 5)) == pytest.approx(0.75)


def test_smoothness_closed_forms():
    assert smoothness(make_response([0.0] * 5, [0.5] * 5)) == 0
    affine = [0.1 + 0.2 * j for j in range(5)]
    assert smoothness(make_response([0.0] * 5, affine)) == pytest.approx(0.0, abs=1e-30)
    delta = 0.01
    alternating = [0.5 + delta * (-1) ** j for j in range(5)]
    assert smoothness(make_response([0.0] * 5, alternating)) == pytest.approx(16 * delta**2)
    with pytest.raises(ValueError):
        smoothness(make_response([0.0] * 2, [1.0] * 2, FrequencyGrid(n_points=2)))


def test_smoothness_matches_numpy():
    rng = np.random.default_rng(0)
    magnitude = rng.uniform(0, 1, size=(3, 5))
    response = make_response(np.zeros((3, 5)), magnitude)
    expected = np.mean(np.diff(magnitude, n=2, axis=-1) ** 2)
    assert smoothness(response) == pytest.approx(expected, rel=1e-12)


def test_report_formats(tmp_path):
    row = ModelReport(MODEL_BASED, 0.01, 0.02, 0.005, 1e-15, 250, 1.5, 1e-6)
    report = EvalReport([row], config={"seed": 0})
    assert report.row(MODEL_BASED) is row
    with pytest.raises(KeyError):
        report.row("rbfn")

    path = tmp_path / "report.json"
    report.write_json(str(path))
    document = json.loads(path.read_text())
    assert document["format_version"] == 1
    assert document["models"][0]["num_params"] == 250
    assert document["config"] == {"seed": 0}

    table = report.format_table().splitlines()
    assert table[0].split()[0] == "model"
    assert table[2].split()[0] == MODEL_BASED


def test_compare_config_validation():
    with pytest.raises(ValueError):
        CompareConfig(models=("svm",))
    with pytest.raises(ValueError):
        CompareConfig(model_based_loss="eq2")
    with pytest.raises(ValueError):
        CompareConfig(fractions=(0.5, 1.0))
    with pytest.raises(ValueError):
        CompareConfig(validation_fraction=1.0)


def test_compare_models(small_dataset):
    config = CompareConfig(train_fraction=0.5, validation_fraction=0.0)
    report = compare_models(small_dataset, config, FAST, FAST_DIRECT)
    assert [row.model for row in report.rows] == [MODEL_BASED, "dnn", "dnn-tanh", "rbfn"]
    assert report.row(MODEL_BASED).num_params == 250
    assert report.row(MODEL_BASED).power_residual < 1e-10
    assert report.row("rbfn").num_params == 4 * 3 + 4 + 5 * 4 * small_dataset.grid.n_points
    assert report.config["training"]["phase2_loss"] == "eq5"
    for row in report.rows:
        assert row.test_mae_s21_complex >= row.test_mae_s21_magnitude
        assert row.train_seconds >= 0


def test_compare_models_dumps_predictions(small_dataset, tmp_path):
    config = CompareConfig(
        train_fraction=0.5, models=(MODEL_BASED, "rbfn"), dump_samples=3
    )
    report = compare_models(small_dataset, config, FAST, FAST_DIRECT)
    dump = report.predictions
    assert dump is not None and list(dump.predictions) == [MODEL_BASED, "rbfn"]
    assert len(dump.sample_ids) == 3
    assert "predictions" not in report.to_dict()

    path = tmp_path / "predictions.json"
    dump.write_json(str(path))
    document = json.loads(path.read_text())
    assert len(document["frequencies_hz"]) == small_dataset.grid.n_points
    first = document["samples"][0]
    assert first["id"] == dump.sample_ids[0]
    assert len(first["geometry"]) == 3
    rbfn = first["predictions"]["rbfn"]["s21"]
    assert len(rbfn["re"]) == len(rbfn["im"]) == small_dataset.grid.n_points
    target = dump.target.s21[0]
    assert first["target"]["s21"]["re"] == target.real.tolist()


def test_phase_predictions(small_dataset):
    config = CompareConfig(train_fraction=0.5)
    dump = phase_predictions(small_dataset, config, FAST)
    assert list(dump.predictions) == ["phase1", "phase2-eq3", "phase2-eq5"]
    assert len(dump.sample_ids) == 4
    for pred in dump.predictions.values():
        assert pred.grid == small_dataset.grid
        assert power_residual(pred) < 1e-10
    with pytest.raises(ValueError):
        CompareConfig(dump_samples=0)


def test_test_split_does_not_select_weights(small_dataset):
    train, test = split(small_dataset, 0.5, seed=0)
    fraction = CompareConfig().validation_fraction
    full, _, _ = _train_and_predict(MODEL_BASED, train, test, FAST, FAST_DIRECT, fraction)
    first = test.subset([0])
    one, _, _ = _train_and_predict(MODEL_BASED, train, first, FAST, FAST_DIRECT, fraction)
    torch.testing.assert_close(one.s, full.s[:1])


def test_compare_models_is_deterministic(small_dataset):
    config = CompareConfig(train_fraction=0.5, models=(MODEL_BASED, "rbfn"))
    a = compare_models(small_dataset, config, FAST, FAST_DIRECT)
    b = compare_models(small_dataset, config, FAST, FAST_DIRECT)
    for row_a, row_b in zip(a.rows, b.rows):
        assert row_a.test_mae_s21_complex == row_b.test_mae_s21_complex


def test_generalization_curve(small_dataset, tmp_path):
    config = CompareConfig(models=(MODEL_BASED, "rbfn"))
    curve = generalization_curve(small_dataset, (0.25, 0.75), config, FAST, FAST_DIRECT)
    assert len(curve.points) == 4
    assert [p.fraction for p in curve.for_model("rbfn")] == [0.25, 0.75]

    path = tmp_path / "curve.csv"
    curve.write_csv(str(path))
    with open(path) as f:
        rows = list(csv.reader(f))
    assert rows[0] == ["fraction", "model", "test_mae_s21_complex"]
    assert len(rows) == 5
    assert json.loads(json.dumps(curve.to_dict()))["points"][0]["model"] == MODEL_BASED


@pytest.mark.slow
def test_model_comparison_on_default_sweep(sweep_dataset):
    report = compare_models(sweep_dataset)
    model_based, rbfn, dnn = (report.row(m) for m in (MODEL_BASED, "rbfn", "dnn"))
    assert model_based.num_params == 250
    assert dnn.num_params == 588_236
    assert rbfn.num_params == 162_404
    assert all(row.num_params > 100_000 for row in report.rows[1:])
    assert model_based.test_mae_s21_complex < rbfn.test_mae_s21_complex
    assert rbfn.test_mae_s21_complex < dnn.test_mae_s21_complex
    assert model_based.power_residual < 1e-10
    for row in report.rows[1:]:
        assert row.power_residual > 1e-3, row.model
    assert model_based.smoothness <= 0.1 * dnn.smoothness


@pytest.mark.slow
def test_phase2_improves_on_phase1(sweep_dataset):
    from model_based_fss.training import response_objective, train_phase1, train_phase2

    train, test = split(sweep_dataset, 0.8, seed=0)
    fit, validation = holdout(train, 0.1, seed=0)
    config = TrainingConfig(phase2_loss="eq3")
    phase1, _ = train_phase1(fit, config)
    phase2, _ = train_phase2(fit, phase1, config, validation=validation)
    before = response_objective(phase1, test, "eq3")
    assert response_objective(phase2, test, "eq3") <= 0.6 * before


@pytest.mark.slow
def test_phase_aware_loss_improves_reflection(sweep_dataset):
    from model_based_fss.training import predict_model_based, train_phase1, train_phase2

    train, test = split(sweep_dataset, 0.8, seed=0)
    fit, validation = holdout(train, 0.1, seed=0)
    phase1, _ = train_phase1(fit, TrainingConfig())
    errors = {}
    for kind in ("eq3", "eq5"):
        config = TrainingConfig(phase2_loss=kind)
        model, _ = train_phase2(fit, phase1, config, validation=validation)
        errors[kind] = mae_complex(predict_model_based(model, test), test.responses(), "s11")
    assert errors["eq5"] * 2 <= errors["eq3"]


@pytest.mark.slow
def test_generalization_curve_on_default_sweep(sweep_dataset):
    config = CompareConfig()
    curve = generalization_curve(sweep_dataset, config.fractions, config)
    assert len(curve.points) == 5 * len(config.models)
    for model in config.models:
        points = curve.for_model(model)
        assert [p.fraction for p in points] == [0.1, 0.3, 0.5, 0.7, 0.9]
        assert points[-1].test_mae_s21_complex <= points[0].test_mae_s21_complex, model
    few = {p.model: p.test_mae_s21_complex for p in curve.points if p.fraction == 0.1}
    assert few[MODEL_BASED] < few["dnn"]
