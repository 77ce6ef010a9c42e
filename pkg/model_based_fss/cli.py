import argparse
import logging
import os
import sys
from dataclasses import replace
from typing import Any, Dict, List, Optional, Sequence

import torch

from model_based_fss import VERSION
from model_based_fss.circuit import DTYPE, f_phys
from model_based_fss.config import ConfigError, RunConfig, load_run_config
from model_based_fss.data import (
    Geometry,
    build_dataset,
    holdout,
    in_bounds,
    read_dataset,
    split,
    write_dataset,
)
from model_based_fss.evalkit import (
    MODEL_BASED,
    EvalReport,
    ModelReport,
    compare_models,
    generalization_curve,
    phase_predictions,
)
from model_based_fss.models import count_params, mlp_forward
from model_based_fss.touchstone import write_touchstone
from model_based_fss.training import (
    PHASE1_LOSSES,
    PHASE2_LOSSES,
    LossHistory,
    load_checkpoint,
    predict_model_based,
    save_checkpoint,
    train_phase1,
    train_phase2,
)

logger = logging.getLogger(__name__)

EXIT_OK, EXIT_FAILURE, EXIT_USAGE = 0, 1, 2


class UsageError(Exception):
    pass


def _check_output(path: str, force: bool) -> None:
    if os.path.exists(path) and not force:
        raise UsageError(f"{path} already exists; pass --force to overwrite")
    directory = os.path.dirname(path)
    if directory:
        os.makedirs(directory, exist_ok=True)


def _check_input(path: str, what: str) -> None:
    if not os.path.isfile(path):
        raise UsageError(f"{what} not found: {path}")


def _parse_levels(text: str) -> List[int]:
    try:
        levels = [int(value) for value in text.split(",")]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected three integers, got '{text}'")
    if len(levels) != 3 or min(levels) < 1:
        raise argparse.ArgumentTypeError(f"expected three integers >= 1, got '{text}'")
    return levels


def _parse_fractions(text: str) -> List[float]:
    try:
        return [float(value) for value in text.split(",")]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated reals, got '{text}'")


def _history_path(checkpoint_path: str) -> str:
    return os.path.splitext(checkpoint_path)[0] + "_history.csv"


def cmd_gen_data(config: RunConfig, out: str, force: bool) -> None:
    _check_output(out, force)
    dataset = build_dataset(config.sweep, config.topology, progress=config.progress)
    write_dataset(dataset, out, config=config.to_dict())
    residual = sum(sample.residual for sample in dataset.samples) / len(dataset)
    print(f"samples: {len(dataset)}")
    print(f"mean extraction residual |ds21|: {residual:.6e}")


def cmd_train(
    config: RunConfig,
    dataset_path: str,
    out: str,
    force: bool,
    phase: str = "both",
    init: Optional[str] = None,
) -> None:
    _check_input(dataset_path, "Dataset")
    if phase == "2":
        if init is None:
            raise UsageError("--phase 2 needs a phase-1 checkpoint (--init)")
        _check_input(init, "Checkpoint")
    _check_output(out, force)

    dataset = read_dataset(dataset_path)
    train, test = split(dataset, config.compare.train_fraction, config.seed)
    train, validation = holdout(train, config.compare.validation_fraction, config.seed)
    history = LossHistory()
    if phase in ("1", "both"):
        model, phase_history = train_phase1(train, config.training, test=test)
        history = history.extend(phase_history)
    else:
        model = load_checkpoint(init).model  # type: ignore
    if phase in ("2", "both"):
        model, phase_history = train_phase2(
            train, model, config.training, test=test, validation=validation
        )
        history = history.extend(phase_history)

    echo = {**config.to_dict(), "phase": phase, "dataset": dataset_path}
    save_checkpoint(model, out, dataset.topology, dataset.grid, config=echo)
    history.write_csv(_history_path(out))
    print(f"checkpoint: {out}")
    if len(history):
        last = history.rows[-1]
        print(f"final phase-{last.phase} train loss {last.train:.6e}, test {last.test:.6e}")


def cmd_predict(
    config: RunConfig, checkpoint_path: str, geometry: Sequence[float], out: str, force: bool
) -> None:
    _check_input(checkpoint_path, "Checkpoint")
    _check_output(out, force)
    checkpoint = load_checkpoint(checkpoint_path)
    x = Geometry(*geometry)
    if not in_bounds(x, config.sweep):
        logger.warning("Geometry %s lies outside the sweep bounds; extrapolating", x)

    with torch.no_grad():
        params = mlp_forward(checkpoint.model, x.as_tensor())
    spacer_lengths = torch.full(
        (len(checkpoint.topology.spacers),), x.separation * 1e-3, dtype=DTYPE
    )
    response = f_phys(
        params, checkpoint.topology, checkpoint.grid, spacer_lengths=spacer_lengths
    )
    write_touchstone(response, out, comments=[f"geometry (mm): {list(x)}"])
    for k in range(len(checkpoint.topology.screens)):
        print(f"L{k + 1} = {params[2 * k].item():.9e} H")
        print(f"C{k + 1} = {params[2 * k + 1].item():.9e} F")


def cmd_eval(
    config: RunConfig, checkpoint_path: str, dataset_path: str, out: str, force: bool
) -> None:
    _check_input(checkpoint_path, "Checkpoint")
    _check_input(dataset_path, "Dataset")
    _check_output(out, force)
    checkpoint = load_checkpoint(checkpoint_path)
    dataset = read_dataset(dataset_path)
    _, test = split(dataset, config.compare.train_fraction, config.seed)
    if len(test) == 0:
        raise UsageError("Dataset has no test samples to evaluate on")

    pred = predict_model_based(checkpoint.model, test)
    num_params = count_params(checkpoint.model)
    row = ModelReport.evaluate(MODEL_BASED, pred, test.responses(), num_params, 0.0)
    report = EvalReport([row], config={**config.to_dict(), "checkpoint": checkpoint_path})
    report.write_json(out)
    print(report.format_table(), end="")


def cmd_compare(
    config: RunConfig,
    dataset_path: str,
    out_dir: str,
    force: bool,
    fractions: Optional[Sequence[float]] = None,
) -> None:
    if fractions is not None and not all(0 < f < 1 for f in fractions):
        raise UsageError(f"--fractions must lie in (0, 1), got {list(fractions)}")
    _check_input(dataset_path, "Dataset")
    outputs = {
        name: os.path.join(out_dir, name)
        for name in (
            "report.json",
            "report.txt",
            "predictions.json",
            "phases.json",
            "generalization.csv",
            "generalization.json",
        )
    }
    for path in outputs.values():
        _check_output(path, force)
    dataset = read_dataset(dataset_path)

    report = compare_models(dataset, config.compare, config.training, config.direct)
    report.config = {**config.to_dict(), "dataset": dataset_path}
    report.write_json(outputs["report.json"])
    report.write_text(outputs["report.txt"])
    print(report.format_table(), end="")
    if report.predictions is not None:
        report.predictions.write_json(outputs["predictions.json"])
    phase_predictions(dataset, config.compare, config.training).write_json(
        outputs["phases.json"]
    )

    curve = generalization_curve(
        dataset,
        fractions if fractions is not None else config.compare.fractions,
        config.compare,
        config.training,
        config.direct,
    )
    curve.write_csv(outputs["generalization.csv"])
    curve.write_json(outputs["generalization.json"])
    print(f"reports written to {out_dir}")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="model-based-fss",
        description="Model-based learning of frequency selective surface responses.",
    )
    parser.add_argument("--version", action="version", version=VERSION)
    parser.add_argument("--config", type=str, default=None, help="JSON run config")
    parser.add_argument("--seed", type=int, default=None)
    parser.add_argument("--out", type=str, default=None, help="output path")
    parser.add_argument("--force", action="store_true", help="overwrite outputs")
    parser.add_argument("--progress", action="store_true", help="show progress bars")
    subparsers = parser.add_subparsers(dest="command", required=True)

    gen_data = subparsers.add_parser("gen-data", help="sweep, simulate, extract")
    gen_data.add_argument("--levels", type=_parse_levels, default=None)
    gen_data.add_argument(
        "--unperturbed",
        action="store_true",
        help="oracle without dispersion or second resonance",
    )

    train = subparsers.add_parser("train", help="train the geometry -> circuit MLP")
    train.add_argument("--dataset", type=str, default=None)
    train.add_argument("--phase", choices=("1", "2", "both"), default="both")
    train.add_argument("--loss", choices=(*PHASE1_LOSSES, *PHASE2_LOSSES), default=None)
    train.add_argument("--init", type=str, default=None, help="phase-1 checkpoint")
    train.add_argument("--epochs", type=int, default=None, help="epochs per phase")

    predict = subparsers.add_parser("predict", help="geometry -> Touchstone file")
    predict.add_argument("--checkpoint", type=str, default=None)
    predict.add_argument(
        "--geometry",
        type=float,
        nargs=3,
        required=True,
        metavar=("SLOT_LENGTH", "SEPARATION", "SLOT_LENGTH_2"),
        help="geometry in mm",
    )

    evaluate = subparsers.add_parser("eval", help="evaluate a checkpoint")
    evaluate.add_argument("--checkpoint", type=str, default=None)
    evaluate.add_argument("--dataset", type=str, default=None)

    compare = subparsers.add_parser("compare", help="model comparison report")
    compare.add_argument("--dataset", type=str, default=None)
    compare.add_argument("--fractions", type=_parse_fractions, default=None)
    return parser


def _overrides(args: argparse.Namespace) -> Dict[str, Any]:
    overrides: Dict[str, Any] = {}
    if args.seed is not None:
        overrides["seed"] = args.seed
    if args.progress:
        overrides["progress"] = True
    training: Dict[str, Any] = {}
    if getattr(args, "loss", None) in PHASE1_LOSSES:
        training["phase1_loss"] = args.loss
    elif getattr(args, "loss", None) in PHASE2_LOSSES:
        training["phase2_loss"] = args.loss
    if getattr(args, "epochs", None) is not None:
        training["phase1_epochs"] = training["phase2_epochs"] = args.epochs
    if training:
        overrides["training"] = training
    return overrides


def run(args: argparse.Namespace) -> None:
    config = load_run_config(args.config, _overrides(args))
    paths = config.paths

    if args.command == "gen-data":
        sweep = config.sweep
        if args.levels is not None:
            sweep = sweep.with_levels(args.levels)
        if args.unperturbed:
            sweep = sweep.unperturbed()
        config = replace(config, sweep=sweep)
        cmd_gen_data(config, args.out or paths.dataset, args.force)
    elif args.command == "train":
        cmd_train(
            config,
            args.dataset or paths.dataset,
            args.out or paths.checkpoint,
            args.force,
            phase=args.phase,
            init=args.init,
        )
    elif args.command == "predict":
        cmd_predict(
            config,
            args.checkpoint or paths.checkpoint,
            args.geometry,
            args.out or os.path.join(paths.out_dir, "prediction.s2p"),
            args.force,
        )
    elif args.command == "eval":
        cmd_eval(
            config,
            args.checkpoint or paths.checkpoint,
            args.dataset or paths.dataset,
            args.out or os.path.join(paths.out_dir, "eval.json"),
            args.force,
        )
    elif args.command == "compare":
        cmd_compare(
            config,
            args.dataset or paths.dataset,
            args.out or paths.out_dir,
            args.force,
            fractions=args.fractions,
        )


def main(argv: Optional[Sequence[str]] = None) -> int:
    logging.basicConfig(
        level=logging.INFO,
        format="%(levelname)s %(name)s: %(message)s",
        stream=sys.stderr,
    )
    args = build_parser().parse_args(argv)
    try:
        run(args)
    except (ConfigError, UsageError) as e:
        logger.error("%s", e)
        return EXIT_USAGE
    except Exception as e:
        logger.exception("%s failed: %s", args.command, e)
        return EXIT_FAILURE
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
