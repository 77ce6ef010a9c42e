from typing import Any, Callable, Dict, List, Literal, NamedTuple, Optional, Sequence

import torch
import torch.nn.functional as F
from einops import rearrange
from torch import Tensor, nn

from model_based_fss.circuit import DTYPE, FrequencyGrid, SResponse

ActivationString = Literal["tanh", "relu"]
DEFAULT_MLP_SIZES = (3, 14, 10, 4)
DEFAULT_DNN_HIDDEN = (4, 8, 16, 32, 64, 128, 256, 512)


def _get_activation_fn(activation: str) -> Callable[[Tensor], Tensor]:
    """Return an activation function given a string"""
    if activation == "tanh":
        return torch.tanh
    elif activation == "relu":
        return F.relu
    else:
        raise RuntimeError(
            f"Unsupported activation string '{activation}'. Supported: 'tanh', 'relu'"
        )


class Normalization(NamedTuple):
    """Per-feature standardization (x - mean) / std."""

    mean: Tensor
    std: Tensor

    @classmethod
    def fit(cls, x: Tensor) -> "Normalization":
        mean = x.mean(dim=0)
        std = x.std(dim=0, correction=0) if x.shape[0] > 1 else torch.ones_like(mean)
        # Constant features (e.g. a single sweep level) are left unscaled.
        std = torch.where(std > 0, std, torch.ones_like(std))
        return cls(mean, std)

    @classmethod
    def identity(cls, dim: int) -> "Normalization":
        return cls(torch.zeros(dim, dtype=DTYPE), torch.ones(dim, dtype=DTYPE))

    def apply(self, x: Tensor) -> Tensor:
        return (x - self.mean) / self.std

    def invert(self, u: Tensor) -> Tensor:
        return u * self.std + self.mean

    def to_dict(self) -> Dict[str, List[float]]:
        return {"mean": self.mean.tolist(), "std": self.std.tolist()}

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> "Normalization":
        return cls(
            torch.tensor(data["mean"], dtype=DTYPE),
            torch.tensor(data["std"], dtype=DTYPE),
        )


class CircuitNormalization(NamedTuple):
    """Circuit parameters live in normalized log space, shifted by 'margin':

        u = (log(c) - mean) / std + margin

    The network's softplus head produces u >= 0 directly, so the margin is the
    number of standard deviations the head can reach below the mean.
    """

    log: Normalization
    margin: float = 4.0

    @classmethod
    def fit(cls, params: Tensor, margin: float = 4.0) -> "CircuitNormalization":
        return cls(Normalization.fit(torch.log(params)), margin)

    def apply(self, params: Tensor) -> Tensor:
        return self.log.apply(torch.log(params)) + self.margin

    def invert(self, u: Tensor) -> Tensor:
        return torch.exp(self.log.invert(u - self.margin))

    def to_dict(self) -> Dict[str, Any]:
        return {**self.log.to_dict(), "margin": self.margin}

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> "CircuitNormalization":
        return cls(Normalization.from_dict(data), float(data["margin"]))


def _linear_stack(sizes: Sequence[int], dtype: torch.dtype) -> nn.ModuleList:
    if len(sizes) < 2 or any(size < 1 for size in sizes):
        raise ValueError(f"Invalid layer sizes {tuple(sizes)}")
    return nn.ModuleList(
        [nn.Linear(i, o, dtype=dtype) for i, o in zip(sizes[:-1], sizes[1:])]
    )


class CircuitMLP(nn.Module):
    """Geometry -> circuit parameters.  Hidden layers use 'activation', the output
    layer a softplus, whose value is read in normalized log units (see
    'CircuitNormalization') and mapped back to strictly positive L/C values.
    """

    def __init__(
        self,
        layer_sizes: Sequence[int] = DEFAULT_MLP_SIZES,
        activation: ActivationString = "tanh",
        x_norm: Optional[Normalization] = None,
        c_norm: Optional[CircuitNormalization] = None,
        dtype: torch.dtype = DTYPE,
    ) -> None:
        super().__init__()
        self.layer_sizes = tuple(int(size) for size in layer_sizes)
        self.activation_name = activation
        self.activation = _get_activation_fn(activation)
        self.layers = _linear_stack(self.layer_sizes, dtype)
        self.x_norm = x_norm or Normalization.identity(self.input_dim)
        self.c_norm = c_norm or CircuitNormalization(
            Normalization.identity(self.output_dim)
        )

    @property
    def input_dim(self) -> int:
        return self.layer_sizes[0]

    @property
    def output_dim(self) -> int:
        return self.layer_sizes[-1]

    def head(self, x_norm: Tensor) -> Tensor:
        """Raw (pre-softplus) output for already-normalized inputs."""
        for layer in self.layers[:-1]:
            x_norm = self.activation(layer(x_norm))
        return self.layers[-1](x_norm)

    def normalized_output(self, x: Tensor) -> Tensor:
        return F.softplus(self.head(self.x_norm.apply(x)))

    def forward(self, x: Tensor) -> Tensor:
        return self.c_norm.invert(self.normalized_output(x))


class DirectDNN(nn.Module):
    """Purely data-driven baseline: geometry -> flattened S-parameters
    [Re s11, Im s11, Re s21, Im s21] per frequency (length 4 * n_points).
    """

    def __init__(
        self,
        input_dim: int,
        output_dim: int,
        hidden_sizes: Sequence[int] = DEFAULT_DNN_HIDDEN,
        activation: ActivationString = "relu",
        dropout: float = 0.1,
        x_norm: Optional[Normalization] = None,
        dtype: torch.dtype = DTYPE,
    ) -> None:
        super().__init__()
        self.layer_sizes = (int(input_dim), *map(int, hidden_sizes), int(output_dim))
        self.activation_name = activation
        self.activation = _get_activation_fn(activation)
        self.dropout = nn.Dropout(dropout)
        self.layers = _linear_stack(self.layer_sizes, dtype)
        self.x_norm = x_norm or Normalization.identity(input_dim)

    def forward(self, x: Tensor) -> Tensor:
        x = self.x_norm.apply(x)
        for layer in self.layers[:-1]:
            x = self.dropout(self.activation(layer(x)))
        return self.layers[-1](x)


class RBFN(nn.Module):
    """Gaussian radial basis function network with a linear readout.  Centers and
    widths are set by 'model_based_fss.training.fit_rbfn', not by gradient descent.
    """

    def __init__(
        self,
        input_dim: int,
        output_dim: int,
        num_centers: int = 200,
        x_norm: Optional[Normalization] = None,
        dtype: torch.dtype = DTYPE,
    ) -> None:
        super().__init__()
        if num_centers < 1:
            raise ValueError(f"num_centers must be >= 1, got {num_centers}")
        self.centers = nn.Parameter(torch.zeros(num_centers, input_dim, dtype=dtype))
        self.widths = nn.Parameter(torch.ones(num_centers, dtype=dtype))
        self.readout = nn.Linear(num_centers, output_dim, dtype=dtype)
        self.x_norm = x_norm or Normalization.identity(input_dim)

    def features(self, x_norm: Tensor) -> Tensor:
        distances = torch.cdist(x_norm, self.centers)
        return torch.exp(-distances.pow(2) / (2 * self.widths.pow(2)))

    def forward(self, x: Tensor) -> Tensor:
        return self.readout(self.features(self.x_norm.apply(x)))


def count_params(model: nn.Module) -> int:
    return sum(p.numel() for p in model.parameters())


def mlp_forward(model: CircuitMLP, x: Tensor) -> Tensor:
    if x.dim() == 0 or x.shape[-1] != model.input_dim:
        raise ValueError(
            f"Expected geometry with last dimension {model.input_dim}, "
            f"got shape {tuple(x.shape)}"
        )
    return model(x)


def mlp_backward(model: CircuitMLP, x: Tensor, upstream: Tensor) -> List[Tensor]:
    """Reverse accumulation of 'upstream' (dLoss/dc) through the network.  Returns
    one gradient per entry of 'model.parameters()'.
    """
    params = mlp_forward(model, x)
    if upstream.shape != params.shape:
        raise ValueError(
            f"Upstream gradient shape {tuple(upstream.shape)} does not match "
            f"circuit params {tuple(params.shape)}"
        )
    return list(
        torch.autograd.grad(params, list(model.parameters()), grad_outputs=upstream)
    )


def flatten_response(s: Tensor) -> Tensor:
    """S matrices (b, n, 2, 2) -> direct-model targets (b, 4 * n)."""
    s11 = torch.view_as_real(s[..., 0, 0])
    s21 = torch.view_as_real(s[..., 1, 0])
    return rearrange(torch.cat((s11, s21), dim=-1), "b n k -> b (n k)")


def unflatten_response(y: Tensor, grid: FrequencyGrid) -> SResponse:
    """Direct-model outputs (b, 4 * n) -> SResponse.  Direct models only predict
    s11 and s21, so the network is taken as symmetric and reciprocal.
    """
    y = rearrange(y.to(DTYPE), "b (n k) -> b n k", n=grid.n_points, k=4)
    s11 = torch.complex(y[..., 0], y[..., 1])
    s21 = torch.complex(y[..., 2], y[..., 3])
    top = torch.stack((s11, s21), dim=-1)
    bottom = torch.stack((s21, s11), dim=-1)
    return SResponse(grid, torch.stack((top, bottom), dim=-2))
