import csv
import json
import logging
import time
from dataclasses import asdict, dataclass, field, replace
from typing import Any, Dict, List, NamedTuple, Optional, Sequence, Tuple

import torch

from model_based_fss.circuit import SResponse
from model_based_fss.data import FSSDataset, holdout, split
from model_based_fss.models import count_params
from model_based_fss.training import (
    DIRECT_MODELS,
    PHASE2_LOSSES,
    DirectConfig,
    TrainingConfig,
    predict_direct,
    predict_model_based,
    train_direct,
    train_phase1,
    train_phase2,
    train_two_phase,
)

logger = logging.getLogger(__name__)

REPORT_FORMAT_VERSION = 1
MODEL_BASED = "model-based"
MODEL_KINDS = (MODEL_BASED, *DIRECT_MODELS)
CURVE_HEADER = ("fraction", "model", "test_mae_s21_complex")


def _check_pair(pred: SResponse, target: SResponse) -> None:
    if pred.grid != target.grid:
        raise ValueError(f"Grid mismatch: {pred.grid} vs {target.grid}")
    if pred.s.shape != target.s.shape:
        raise ValueError(
            f"Shape mismatch: {tuple(pred.s.shape)} vs {tuple(target.s.shape)}"
        )


def _component(response: SResponse, which: str) -> torch.Tensor:
    if which == "s11":
        return response.s11
    elif which == "s21":
        return response.s21
    raise ValueError(f"Unsupported component '{which}'. Supported: 's11', 's21'")


def mae_complex(pred: SResponse, target: SResponse, which: str = "s21") -> float:
    """Mean modulus of the complex difference over samples and frequencies."""
    _check_pair(pred, target)
    return (_component(pred, which) - _component(target, which)).abs().mean().item()


def magnitude_mae(pred: SResponse, target: SResponse, which: str = "s21") -> float:
    _check_pair(pred, target)
    diff = _component(pred, which).abs() - _component(target, which).abs()
    return diff.abs().mean().item()


def power_residual(pred: SResponse) -> float:
    """max | |s11|^2 + |s21|^2 - 1 |, zero for any lossless network."""
    power = pred.s11.abs().pow(2) + pred.s21.abs().pow(2)
    return (power - 1).abs().max().item()


def smoothness(pred: SResponse) -> float:
    """Curvature energy of |s21|: the mean squared second difference along the
    frequency axis, averaged over samples.
    """
    magnitude = pred.s21.abs()
    if magnitude.shape[-1] < 3:
        raise ValueError("smoothness() needs at least 3 frequency points")
    second = magnitude[..., 2:] - 2 * magnitude[..., 1:-1] + magnitude[..., :-2]
    return second.pow(2).mean().item()


@dataclass
class ModelReport:
    model: str
    test_mae_s21_complex: float
    test_mae_s11_complex: float
    test_mae_s21_magnitude: float
    power_residual: float
    num_params: int
    train_seconds: float
    smoothness: float

    @classmethod
    def evaluate(
        cls,
        model: str,
        pred: SResponse,
        target: SResponse,
        num_params: int,
        train_seconds: float,
    ) -> "ModelReport":
        return cls(
            model=model,
            test_mae_s21_complex=mae_complex(pred, target, "s21"),
            test_mae_s11_complex=mae_complex(pred, target, "s11"),
            test_mae_s21_magnitude=magnitude_mae(pred, target, "s21"),
            power_residual=power_residual(pred),
            num_params=num_params,
            train_seconds=train_seconds,
            smoothness=smoothness(pred),
        )


def _encode_components(response: SResponse, index: int) -> Dict[str, Dict[str, List[float]]]:
    return {
        name: {
            "re": _component(response, name)[index].real.tolist(),
            "im": _component(response, name)[index].imag.tolist(),
        }
        for name in ("s11", "s21")
    }


@dataclass
class PredictionDump:
    """Per-sample test responses for overlay plots: the target and one predicted
    response per label, all on the target's frequency grid.
    """

    target: SResponse
    sample_ids: List[int]
    geometries: List[List[float]]
    predictions: Dict[str, SResponse] = field(default_factory=dict)

    @classmethod
    def for_dataset(cls, dataset: FSSDataset, max_samples: int) -> "PredictionDump":
        head = dataset.subset(range(min(max_samples, len(dataset))))
        return cls(
            target=head.responses(),
            sample_ids=[sample.id for sample in head.samples],
            geometries=[list(sample.x) for sample in head.samples],
        )

    def add(self, label: str, pred: SResponse) -> None:
        pred = SResponse(pred.grid, pred.s[: len(self.sample_ids)])
        _check_pair(pred, self.target)
        self.predictions[label] = pred

    def to_dict(self) -> Dict[str, Any]:
        samples = []
        for i, (sample_id, x) in enumerate(zip(self.sample_ids, self.geometries)):
            samples.append(
                {
                    "id": sample_id,
                    "geometry": x,
                    "target": _encode_components(self.target, i),
                    "predictions": {
                        label: _encode_components(pred, i)
                        for label, pred in self.predictions.items()
                    },
                }
            )
        return {
            "format_version": REPORT_FORMAT_VERSION,
            "frequencies_hz": self.target.frequencies.tolist(),
            "labels": list(self.predictions),
            "samples": samples,
        }

    def write_json(self, path: str) -> None:
        with open(path, "w") as f:
            json.dump(self.to_dict(), f, indent=2, sort_keys=True)


@dataclass
class EvalReport:
    rows: List[ModelReport] = field(default_factory=list)
    config: Dict[str, Any] = field(default_factory=dict)
    predictions: Optional[PredictionDump] = None

    def row(self, model: str) -> ModelReport:
        for row in self.rows:
            if row.model == model:
                return row
        raise KeyError(model)

    def to_dict(self) -> Dict[str, Any]:
        return {
            "format_version": REPORT_FORMAT_VERSION,
            "models": [asdict(row) for row in self.rows],
            "config": self.config,
        }

    def write_json(self, path: str) -> None:
        with open(path, "w") as f:
            json.dump(self.to_dict(), f, indent=2, sort_keys=True)

    def format_table(self) -> str:
        header = (
            f"{'model':<12} {'MAE s21':>10} {'MAE s11':>10} {'MAE |s21|':>10} "
            f"{'power res':>10} {'params':>9} {'train [s]':>10} {'smoothness':>11}"
        )
        lines = [header, "-" * len(header)]
        for r in self.rows:
            lines.append(
                f"{r.model:<12} {r.test_mae_s21_complex:>10.4f} "
                f"{r.test_mae_s11_complex:>10.4f} {r.test_mae_s21_magnitude:>10.4f} "
                f"{r.power_residual:>10.2e} {r.num_params:>9d} "
                f"{r.train_seconds:>10.2f} {r.smoothness:>11.3e}"
            )
        return "\n".join(lines) + "\n"

    def write_text(self, path: str) -> None:
        with open(path, "w") as f:
            f.write(self.format_table())


@dataclass
class CompareConfig:
    train_fraction: float = 0.8
    seed: int = 0
    models: Tuple[str, ...] = MODEL_KINDS
    model_based_loss: str = "eq5"
    fractions: Tuple[float, ...] = (0.1, 0.3, 0.5, 0.7, 0.9)
    # Share of each training split held out for phase-2 early-best selection
    validation_fraction: float = 0.1
    # Leading test samples written to the per-sample prediction dump
    dump_samples: int = 16

    def __post_init__(self) -> None:
        self.models = tuple(self.models)
        self.fractions = tuple(float(f) for f in self.fractions)
        unknown = [m for m in self.models if m not in MODEL_KINDS]
        if unknown or not self.models:
            raise ValueError(
                f"Unsupported models {unknown}. Supported: {', '.join(MODEL_KINDS)}"
            )
        if self.model_based_loss not in PHASE2_LOSSES:
            raise ValueError(f"Unsupported phase-2 loss '{self.model_based_loss}'")
        for fraction in (self.train_fraction, *self.fractions):
            if not 0 < fraction < 1:
                raise ValueError(f"Fractions must lie in (0, 1), got {fraction}")
        if not 0 <= self.validation_fraction < 1:
            raise ValueError(
                f"validation_fraction outside [0, 1): {self.validation_fraction}"
            )
        if self.dump_samples < 1:
            raise ValueError(f"dump_samples must be >= 1, got {self.dump_samples}")


def _train_and_predict(
    kind: str,
    train: FSSDataset,
    test: FSSDataset,
    training: TrainingConfig,
    direct: DirectConfig,
    validation_fraction: float = 0.0,
) -> Tuple[SResponse, int, float]:
    # Every model fits on the same samples; the test split only scores.
    fit, validation = holdout(train, validation_fraction, training.seed)
    start = time.perf_counter()
    if kind == MODEL_BASED:
        model, _ = train_two_phase(fit, training, validation=validation)
        seconds = time.perf_counter() - start
        pred = predict_model_based(model, test)
    else:
        model, _ = train_direct(kind, fit, direct)  # type: ignore
        seconds = time.perf_counter() - start
        pred = predict_direct(model, test.geometries(), test.grid)
    return pred, count_params(model), seconds


def compare_models(
    dataset: FSSDataset,
    config: Optional[CompareConfig] = None,
    training: Optional[TrainingConfig] = None,
    direct: Optional[DirectConfig] = None,
) -> EvalReport:
    """Train every configured model on one seeded split and report test metrics."""
    config = config or CompareConfig()
    training = replace(training or TrainingConfig(), phase2_loss=config.model_based_loss)
    direct = direct or DirectConfig()
    train, test = split(dataset, config.train_fraction, config.seed)
    if len(test) == 0:
        raise ValueError("compare_models() needs a dataset with at least 2 samples")

    report = EvalReport(
        config={
            "compare": asdict(config),
            "training": asdict(training),
            "direct": asdict(direct),
        }
    )
    target = test.responses()
    dump = report.predictions = PredictionDump.for_dataset(test, config.dump_samples)
    for kind in config.models:
        logger.info("Training '%s' on %d samples", kind, len(train))
        pred, num_params, seconds = _train_and_predict(
            kind, train, test, training, direct, config.validation_fraction
        )
        report.rows.append(ModelReport.evaluate(kind, pred, target, num_params, seconds))
        dump.add(kind, pred)
    return report


def phase_predictions(
    dataset: FSSDataset,
    config: Optional[CompareConfig] = None,
    training: Optional[TrainingConfig] = None,
) -> PredictionDump:
    """Test responses after phase 1 and after phase 2 with each phase-2 loss,
    all retrained from the same phase-1 weights.
    """
    config = config or CompareConfig()
    training = training or TrainingConfig()
    train, test = split(dataset, config.train_fraction, config.seed)
    if len(test) == 0:
        raise ValueError("phase_predictions() needs a dataset with at least 2 samples")
    fit, validation = holdout(train, config.validation_fraction, training.seed)

    dump = PredictionDump.for_dataset(test, config.dump_samples)
    phase1, _ = train_phase1(fit, training)
    dump.add("phase1", predict_model_based(phase1, test))
    for kind in ("eq3", "eq5"):
        logger.info("phase 2 from shared phase-1 weights with %s", kind)
        phase2, _ = train_phase2(
            fit, phase1, replace(training, phase2_loss=kind), validation=validation
        )
        dump.add(f"phase2-{kind}", predict_model_based(phase2, test))
    return dump


class CurvePoint(NamedTuple):
    fraction: float
    model: str
    test_mae_s21_complex: float


@dataclass
class GeneralizationCurve:
    points: List[CurvePoint] = field(default_factory=list)

    def for_model(self, model: str) -> List[CurvePoint]:
        return [p for p in self.points if p.model == model]

    def write_csv(self, path: str) -> None:
        with open(path, "w", newline="") as f:
            writer = csv.writer(f)
            writer.writerow(CURVE_HEADER)
            for p in self.points:
                writer.writerow([repr(p.fraction), p.model, repr(p.test_mae_s21_complex)])

    def to_dict(self) -> Dict[str, Any]:
        return {
            "format_version": REPORT_FORMAT_VERSION,
            "points": [p._asdict() for p in self.points],
        }

    def write_json(self, path: str) -> None:
        with open(path, "w") as f:
            json.dump(self.to_dict(), f, indent=2, sort_keys=True)


def generalization_curve(
    dataset: FSSDataset,
    fractions: Sequence[float] = (0.1, 0.3, 0.5, 0.7, 0.9),
    config: Optional[CompareConfig] = None,
    training: Optional[TrainingConfig] = None,
    direct: Optional[DirectConfig] = None,
) -> GeneralizationCurve:
    """Test complex-s21 MAE of every configured model against the training
    fraction, each trained on a seeded subset and tested on its complement.
    """
    config = config or CompareConfig()
    training = replace(training or TrainingConfig(), phase2_loss=config.model_based_loss)
    direct = direct or DirectConfig()
    curve = GeneralizationCurve()
    for fraction in fractions:
        train, test = split(dataset, fraction, config.seed)
        target = test.responses()
        for kind in config.models:
            logger.info("fraction %.2f: training '%s'", fraction, kind)
            pred, _, _ = _train_and_predict(
                kind, train, test, training, direct, config.validation_fraction
            )
            curve.points.append(CurvePoint(fraction, kind, mae_complex(pred, target)))
    return curve
