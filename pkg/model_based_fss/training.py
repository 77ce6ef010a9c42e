import copy
import csv
import json
import logging
from dataclasses import dataclass, field
from math import nan, sqrt
from typing import Any, Dict, List, Literal, NamedTuple, Optional, Sequence, Tuple

import torch
import torch.nn.functional as F
from sklearn.cluster import KMeans
from torch import Tensor, nn
from torch.utils.data import DataLoader, TensorDataset
from tqdm import tqdm

from model_based_fss.circuit import DTYPE, FrequencyGrid, SResponse, Topology, f_phys
from model_based_fss.data import FSSDataset
from model_based_fss.jacobian import loss_grad_circuit
from model_based_fss.losses import loss_eq2, response_loss
from model_based_fss.models import (
    DEFAULT_DNN_HIDDEN,
    DEFAULT_MLP_SIZES,
    RBFN,
    CircuitMLP,
    CircuitNormalization,
    DirectDNN,
    Normalization,
    flatten_response,
    mlp_backward,
    mlp_forward,
    unflatten_response,
)

logger = logging.getLogger(__name__)

PHASE1_LOSSES = ("eq2", "eq2-mae")
PHASE2_LOSSES = ("eq1", "eq3", "eq5")
DIRECT_MODELS = ("dnn", "dnn-tanh", "rbfn")
DirectModelString = Literal["dnn", "dnn-tanh", "rbfn"]
CHECKPOINT_FORMAT_VERSION = 1


@dataclass
class TrainingConfig:
    seed: int = 0
    phase1_epochs: int = 2000
    phase2_epochs: int = 2000
    # None trains full-batch
    batch_size: Optional[int] = None
    phase1_lr: float = 1e-3
    phase2_lr: float = 1e-4
    phase1_loss: str = "eq2"
    phase2_loss: str = "eq3"
    betas: Tuple[float, float] = (0.9, 0.999)
    eps: float = 1e-8
    layer_sizes: Tuple[int, ...] = DEFAULT_MLP_SIZES
    activation: str = "tanh"
    margin: float = 4.0
    progress: bool = False

    def __post_init__(self) -> None:
        self.betas = (float(self.betas[0]), float(self.betas[1]))
        self.layer_sizes = tuple(int(size) for size in self.layer_sizes)
        if self.phase1_epochs < 0 or self.phase2_epochs < 0:
            raise ValueError("Epoch counts must be >= 0")
        if self.batch_size is not None and self.batch_size < 1:
            raise ValueError(f"batch_size must be >= 1, got {self.batch_size}")
        if not (self.phase1_lr > 0 and self.phase2_lr > 0 and self.eps > 0):
            raise ValueError("Learning rates and eps must be > 0")
        if self.phase1_loss not in PHASE1_LOSSES:
            raise ValueError(
                f"Unsupported phase-1 loss '{self.phase1_loss}'. "
                f"Supported: {', '.join(PHASE1_LOSSES)}"
            )
        if self.phase2_loss not in PHASE2_LOSSES:
            raise ValueError(
                f"Unsupported phase-2 loss '{self.phase2_loss}'. "
                f"Supported: {', '.join(PHASE2_LOSSES)}"
            )
        if self.activation not in ("tanh", "relu"):
            raise ValueError(f"Unsupported activation '{self.activation}'")
        if self.margin < 0:
            raise ValueError(f"margin must be >= 0, got {self.margin}")


@dataclass
class DirectConfig:
    seed: int = 0
    epochs: int = 1000
    lr: float = 1e-3
    # Cosine decay from lr to min_lr over the epochs
    min_lr: float = 1e-6
    batch_size: Optional[int] = None
    hidden_sizes: Tuple[int, ...] = DEFAULT_DNN_HIDDEN
    dropout: float = 0.1
    num_centers: int = 200
    width_scale: float = 1.0
    ridge: float = 1e-8
    progress: bool = False

    def __post_init__(self) -> None:
        self.hidden_sizes = tuple(int(size) for size in self.hidden_sizes)
        if self.epochs < 0:
            raise ValueError(f"epochs must be >= 0, got {self.epochs}")
        if self.batch_size is not None and self.batch_size < 1:
            raise ValueError(f"batch_size must be >= 1, got {self.batch_size}")
        if not self.lr > 0:
            raise ValueError(f"lr must be > 0, got {self.lr}")
        if not 0 <= self.min_lr <= self.lr:
            raise ValueError(f"min_lr must lie in [0, lr], got {self.min_lr}")
        if not 0 <= self.dropout < 1:
            raise ValueError(f"dropout must lie in [0, 1), got {self.dropout}")
        if self.num_centers < 1:
            raise ValueError(f"num_centers must be >= 1, got {self.num_centers}")
        if not (self.width_scale > 0 and self.ridge >= 0):
            raise ValueError("width_scale must be > 0 and ridge >= 0")


class HistoryRow(NamedTuple):
    epoch: int
    phase: str
    train: float
    test: float = nan


@dataclass
class LossHistory:
    rows: List[HistoryRow] = field(default_factory=list)

    def append(self, epoch: int, phase: str, train: float, test: float = nan) -> None:
        self.rows.append(HistoryRow(epoch, phase, train, test))

    def extend(self, other: "LossHistory") -> "LossHistory":
        return LossHistory(self.rows + other.rows)

    def __len__(self) -> int:
        return len(self.rows)

    def write_csv(self, path: str) -> None:
        with open(path, "w", newline="") as f:
            writer = csv.writer(f)
            writer.writerow(HistoryRow._fields)
            for row in self.rows:
                writer.writerow([row.epoch, row.phase, repr(row.train), repr(row.test)])


class AdamState(NamedTuple):
    step: int
    exp_avg: List[Tensor]
    exp_avg_sq: List[Tensor]
    lr: float = 1e-3
    betas: Tuple[float, float] = (0.9, 0.999)
    eps: float = 1e-8

    @classmethod
    def init(
        cls,
        params: Sequence[Tensor],
        lr: float = 1e-3,
        betas: Tuple[float, float] = (0.9, 0.999),
        eps: float = 1e-8,
    ) -> "AdamState":
        return cls(
            step=0,
            exp_avg=[torch.zeros_like(p) for p in params],
            exp_avg_sq=[torch.zeros_like(p) for p in params],
            lr=lr,
            betas=betas,
            eps=eps,
        )


def adam_step(
    state: AdamState, params: Sequence[Tensor], grads: Sequence[Tensor]
) -> Tuple[AdamState, List[Tensor]]:
    """One bias-corrected Adam update as a pure transition.  Neither 'state' nor
    'params' are modified; the updated copies are returned.
    """
    if not len(params) == len(grads) == len(state.exp_avg):
        raise ValueError(
            f"Got {len(params)} params, {len(grads)} grads and "
            f"{len(state.exp_avg)} moment buffers"
        )
    new_params = [p.detach().clone().requires_grad_(True) for p in params]
    optimizer = torch.optim.Adam(
        new_params, lr=state.lr, betas=state.betas, eps=state.eps, foreach=False
    )
    for p, g, m, v in zip(new_params, grads, state.exp_avg, state.exp_avg_sq):
        if not p.shape == g.shape == m.shape == v.shape:
            raise ValueError(
                f"Shape mismatch: param {tuple(p.shape)}, grad {tuple(g.shape)}"
            )
        p.grad = g.detach().clone()
        optimizer.state[p] = {
            "step": torch.tensor(float(state.step)),
            "exp_avg": m.detach().clone(),
            "exp_avg_sq": v.detach().clone(),
        }
    optimizer.step()

    new_state = state._replace(
        step=state.step + 1,
        exp_avg=[optimizer.state[p]["exp_avg"] for p in new_params],
        exp_avg_sq=[optimizer.state[p]["exp_avg_sq"] for p in new_params],
    )
    return new_state, [p.detach() for p in new_params]


def _batch_loader(
    num_samples: int, batch_size: Optional[int], seed: int
) -> DataLoader:
    generator = torch.Generator().manual_seed(seed)
    return DataLoader(
        TensorDataset(torch.arange(num_samples)),
        batch_size=batch_size or num_samples,
        shuffle=batch_size is not None and batch_size < num_samples,
        generator=generator,
    )


def _check_nonempty(dataset: FSSDataset, name: str) -> None:
    if len(dataset) == 0:
        raise ValueError(f"{name}() needs a nonempty training set")


def _has_samples(dataset: Optional[FSSDataset]) -> bool:
    return dataset is not None and len(dataset) > 0


@torch.no_grad()
def predict_model_based(model: CircuitMLP, dataset: FSSDataset) -> SResponse:
    params = model(dataset.geometries())
    return f_phys(
        params, dataset.topology, dataset.grid, spacer_lengths=dataset.spacer_lengths()
    )


@torch.no_grad()
def circuit_objective(model: CircuitMLP, dataset: FSSDataset, kind: str = "eq2") -> float:
    pred = model(dataset.geometries())
    return loss_eq2(pred, dataset.circuit_params(), model.c_norm, kind).item()


def response_objective(model: CircuitMLP, dataset: FSSDataset, kind: str = "eq3") -> float:
    return response_loss(kind, predict_model_based(model, dataset), dataset.responses()).item()


def train_phase1(
    train: FSSDataset,
    config: Optional[TrainingConfig] = None,
    test: Optional[FSSDataset] = None,
) -> Tuple[CircuitMLP, LossHistory]:
    """Fit the geometry -> circuit network to the extracted circuit labels."""
    config = config or TrainingConfig()
    _check_nonempty(train, "train_phase1")
    x, c = train.geometries(), train.circuit_params()
    if config.layer_sizes[0] != x.shape[-1] or config.layer_sizes[-1] != c.shape[-1]:
        raise ValueError(
            f"layer_sizes {config.layer_sizes} do not map {x.shape[-1]} geometry "
            f"features to {c.shape[-1]} circuit params"
        )

    torch.manual_seed(config.seed)
    model = CircuitMLP(
        config.layer_sizes,
        config.activation,  # type: ignore
        x_norm=Normalization.fit(x),
        c_norm=CircuitNormalization.fit(c, config.margin),
    )
    optimizer = torch.optim.Adam(
        model.parameters(), lr=config.phase1_lr, betas=config.betas, eps=config.eps
    )
    loader = _batch_loader(len(train), config.batch_size, config.seed)
    history = LossHistory()

    with tqdm(
        range(1, config.phase1_epochs + 1),
        desc="phase 1",
        disable=not config.progress,
    ) as progbar:
        for epoch in progbar:
            train_loss = 0.0
            for (idx,) in loader:
                optimizer.zero_grad()
                loss = loss_eq2(model(x[idx]), c[idx], model.c_norm, config.phase1_loss)
                loss.backward()
                optimizer.step()
                train_loss += loss.item() * len(idx) / len(train)

            test_loss = nan
            if _has_samples(test):
                test_loss = circuit_objective(model, test, config.phase1_loss)
            history.append(epoch, "1", train_loss, test_loss)
            progbar.set_postfix_str(
                f"loss={train_loss:.4e}, test={test_loss:.4e}", refresh=False
            )

    logger.info(
        "phase 1: %d epochs, final %s train loss %.4e",
        config.phase1_epochs,
        config.phase1_loss,
        history.rows[-1].train if history.rows else nan,
    )
    return model, history


def end_to_end_grad(
    model: CircuitMLP,
    x: Tensor,
    target: SResponse,
    topology: Topology,
    loss_kind: str = "eq3",
    spacer_lengths: Optional[Tensor] = None,
) -> Tuple[Tensor, List[Tensor]]:
    """Gradient of an S-parameter loss with respect to the network weights:
    the physics gradient dLoss/dc, pulled back through the network.
    """
    params = mlp_forward(model, x)
    loss, dloss_dc = loss_grad_circuit(
        params.detach(),
        target,
        topology,
        target.grid,
        loss_kind,
        spacer_lengths=spacer_lengths,
    )
    return loss, mlp_backward(model, x, dloss_dc)


def train_phase2(
    train: FSSDataset,
    init: CircuitMLP,
    config: Optional[TrainingConfig] = None,
    test: Optional[FSSDataset] = None,
    validation: Optional[FSSDataset] = None,
) -> Tuple[CircuitMLP, LossHistory]:
    """Retrain end-to-end through the circuit physics on S-parameter error.

    The returned weights are the best seen on the monitored split (the validation
    split if given, else the training split), with the phase-1 weights as the
    first candidate, so the monitored objective never ends above its phase-1
    value.  The test split is only logged and never selects weights.
    """
    config = config or TrainingConfig()
    _check_nonempty(train, "train_phase2")
    kind = config.phase2_loss
    model = copy.deepcopy(init)
    x, target = train.geometries(), train.responses()
    lengths = train.spacer_lengths()
    monitor = validation if _has_samples(validation) else train

    torch.manual_seed(config.seed)
    optimizer = torch.optim.Adam(
        model.parameters(), lr=config.phase2_lr, betas=config.betas, eps=config.eps
    )
    loader = _batch_loader(len(train), config.batch_size, config.seed)
    history = LossHistory()
    best_loss = response_objective(model, monitor, kind)
    best_state = copy.deepcopy(model.state_dict())
    best_epoch = 0

    with tqdm(
        range(1, config.phase2_epochs + 1),
        desc="phase 2",
        disable=not config.progress,
    ) as progbar:
        for epoch in progbar:
            train_loss = 0.0
            for (idx,) in loader:
                optimizer.zero_grad()
                loss, grads = end_to_end_grad(
                    model,
                    x[idx],
                    target.select(idx),
                    train.topology,
                    kind,
                    spacer_lengths=lengths[idx],
                )
                for p, g in zip(model.parameters(), grads):
                    p.grad = g
                optimizer.step()
                train_loss += loss.item() * len(idx) / len(train)

            monitor_loss = response_objective(model, monitor, kind)
            test_loss = nan
            if _has_samples(test):
                test_loss = response_objective(model, test, kind)  # type: ignore
            history.append(epoch, "2", train_loss, test_loss)
            if monitor_loss < best_loss:
                best_loss, best_epoch = monitor_loss, epoch
                best_state = copy.deepcopy(model.state_dict())
            progbar.set_postfix_str(
                f"loss={train_loss:.4e}, test={test_loss:.4e}", refresh=False
            )

    model.load_state_dict(best_state)
    logger.info(
        "phase 2: best %s objective %.4e at epoch %d of %d",
        kind,
        best_loss,
        best_epoch,
        config.phase2_epochs,
    )
    return model, history


def train_two_phase(
    train: FSSDataset,
    config: Optional[TrainingConfig] = None,
    test: Optional[FSSDataset] = None,
    validation: Optional[FSSDataset] = None,
) -> Tuple[CircuitMLP, LossHistory]:
    config = config or TrainingConfig()
    model, history1 = train_phase1(train, config, test=test)
    model, history2 = train_phase2(train, model, config, test=test, validation=validation)
    return model, history1.extend(history2)


def fit_rbfn(
    x: Tensor,
    y: Tensor,
    num_centers: int = 200,
    width_scale: float = 1.0,
    ridge: float = 1e-8,
    seed: int = 0,
) -> RBFN:
    """Centers by seeded k-means on the normalized geometries, widths from the
    distance to the nearest other center, readout by ridge least squares.
    """
    if len(x) == 0:
        raise ValueError("fit_rbfn() needs a nonempty training set")
    x_norm = Normalization.fit(x)
    features = x_norm.apply(x)
    k = min(num_centers, len(x))
    if k < num_centers:
        logger.warning(
            "Only %d training samples; using %d RBF centers instead of %d",
            len(x),
            k,
            num_centers,
        )
    kmeans = KMeans(n_clusters=k, n_init=10, random_state=seed).fit(features.numpy())
    centers = torch.from_numpy(kmeans.cluster_centers_).to(DTYPE)

    if k > 1:
        distances = torch.cdist(centers, centers)
        distances.fill_diagonal_(float("inf"))
        widths = distances.min(dim=1).values
        widths = torch.where(widths > 0, widths, torch.ones_like(widths))
    else:
        widths = torch.ones(1, dtype=DTYPE)
    widths = width_scale * widths

    model = RBFN(x.shape[-1], y.shape[-1], num_centers=k, x_norm=x_norm)
    with torch.no_grad():
        model.centers.copy_(centers)
        model.widths.copy_(widths)
        phi = model.features(features)
        design = torch.cat((phi, torch.ones(len(x), 1, dtype=DTYPE)), dim=1)
        # Ridge penalty on the weights only, not the bias column.
        penalty = sqrt(ridge) * torch.eye(k + 1, dtype=DTYPE)[:k]
        lhs = torch.cat((design, penalty), dim=0)
        rhs = torch.cat((y.to(DTYPE), torch.zeros(k, y.shape[-1], dtype=DTYPE)), dim=0)
        solution = torch.linalg.lstsq(lhs, rhs, driver="gelsd").solution
        model.readout.weight.copy_(solution[:k].T)
        model.readout.bias.copy_(solution[k])
    return model


@torch.no_grad()
def predict_direct(model: nn.Module, x: Tensor, grid: FrequencyGrid) -> SResponse:
    model.eval()
    return unflatten_response(model(x), grid)


def _direct_mae(model: nn.Module, dataset: FSSDataset) -> float:
    pred = predict_direct(model, dataset.geometries(), dataset.grid)
    return F.l1_loss(flatten_response(pred.s), flatten_response(dataset.responses().s)).item()


def train_direct(
    kind: DirectModelString,
    train: FSSDataset,
    config: Optional[DirectConfig] = None,
    test: Optional[FSSDataset] = None,
) -> Tuple[nn.Module, LossHistory]:
    """Purely data-driven baselines: geometry -> flattened [Re/Im s11, Re/Im s21]."""
    config = config or DirectConfig()
    if kind not in DIRECT_MODELS:
        raise ValueError(
            f"Unsupported direct model '{kind}'. Supported: {', '.join(DIRECT_MODELS)}"
        )
    _check_nonempty(train, "train_direct")
    x, y = train.geometries(), flatten_response(train.responses().s)
    history = LossHistory()

    if kind == "rbfn":
        model: nn.Module = fit_rbfn(
            x, y, config.num_centers, config.width_scale, config.ridge, config.seed
        )
        test_loss = _direct_mae(model, test) if _has_samples(test) else nan  # type: ignore
        history.append(1, kind, _direct_mae(model, train), test_loss)
        return model, history

    torch.manual_seed(config.seed)
    model = DirectDNN(
        x.shape[-1],
        y.shape[-1],
        hidden_sizes=config.hidden_sizes,
        activation="relu" if kind == "dnn" else "tanh",
        dropout=config.dropout,
        x_norm=Normalization.fit(x),
    )
    optimizer = torch.optim.Adam(model.parameters(), lr=config.lr)
    scheduler = torch.optim.lr_scheduler.CosineAnnealingLR(
        optimizer, T_max=max(config.epochs, 1), eta_min=config.min_lr
    )
    loader = _batch_loader(len(train), config.batch_size, config.seed)

    with tqdm(
        range(1, config.epochs + 1), desc=kind, disable=not config.progress
    ) as progbar:
        for epoch in progbar:
            model.train()
            train_loss = 0.0
            for (idx,) in loader:
                optimizer.zero_grad()
                loss = F.l1_loss(model(x[idx]), y[idx])
                loss.backward()
                optimizer.step()
                train_loss += loss.item() * len(idx) / len(train)
            scheduler.step()

            test_loss = _direct_mae(model, test) if _has_samples(test) else nan  # type: ignore
            history.append(epoch, kind, train_loss, test_loss)
            progbar.set_postfix_str(
                f"loss={train_loss:.4e}, test={test_loss:.4e}", refresh=False
            )

    logger.info("%s: eval-mode train MAE %.4e", kind, _direct_mae(model, train))
    return model, history


class CheckpointError(ValueError):
    pass


class Checkpoint(NamedTuple):
    model: CircuitMLP
    topology: Topology
    grid: FrequencyGrid
    config: Dict[str, Any]


def save_checkpoint(
    model: CircuitMLP,
    path: str,
    topology: Topology,
    grid: FrequencyGrid,
    config: Optional[Dict[str, Any]] = None,
) -> None:
    linear_layers: List[nn.Linear] = list(model.layers)  # type: ignore
    document = {
        "format_version": CHECKPOINT_FORMAT_VERSION,
        "layer_sizes": list(model.layer_sizes),
        "activations": {"hidden": model.activation_name, "output": "softplus"},
        # Row-major (out x in) weight matrices, one per layer.
        "weights": [layer.weight.tolist() for layer in linear_layers],
        "biases": [layer.bias.tolist() for layer in linear_layers],
        "x_norm": model.x_norm.to_dict(),
        "c_norm": model.c_norm.to_dict(),
        "topology": topology.to_dict(),
        "grid": grid.to_dict(),
        "config": config or {},
    }
    with open(path, "w") as f:
        json.dump(document, f)


def load_checkpoint(path: str) -> Checkpoint:
    try:
        with open(path) as f:
            document = json.load(f)
    except json.JSONDecodeError as e:
        raise CheckpointError(f"Invalid or truncated checkpoint {path}: {e}")

    version = document.get("format_version") if isinstance(document, dict) else None
    if version != CHECKPOINT_FORMAT_VERSION:
        raise CheckpointError(
            f"{path}: unsupported format_version {version!r}, "
            f"expected {CHECKPOINT_FORMAT_VERSION}"
        )
    try:
        model = CircuitMLP(
            document["layer_sizes"],
            document["activations"]["hidden"],
            x_norm=Normalization.from_dict(document["x_norm"]),
            c_norm=CircuitNormalization.from_dict(document["c_norm"]),
        )
        weights, biases = document["weights"], document["biases"]
        if not len(weights) == len(biases) == len(model.layers):
            raise CheckpointError(
                f"{path}: expected {len(model.layers)} weight and bias arrays"
            )
        state_dict = {}
        for i, (weight, bias) in enumerate(zip(weights, biases)):
            state_dict[f"layers.{i}.weight"] = torch.tensor(weight, dtype=DTYPE)
            state_dict[f"layers.{i}.bias"] = torch.tensor(bias, dtype=DTYPE)
        model.load_state_dict(state_dict)
        topology = Topology.from_dict(document["topology"])
        grid = FrequencyGrid.from_dict(document["grid"])
    except (KeyError, TypeError, ValueError, RuntimeError) as e:
        raise CheckpointError(f"{path}: schema violation ({e!r})") from e
    return Checkpoint(model, topology, grid, document.get("config", {}))
