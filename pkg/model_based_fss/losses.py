from typing import Callable, Dict

import torch
from torch import Tensor

from model_based_fss.circuit import SResponse
from model_based_fss.models import CircuitNormalization


def _check_same_shape(pred: Tensor, target: Tensor) -> None:
    if pred.shape != target.shape:
        raise ValueError(
            f"Prediction shape {tuple(pred.shape)} does not match target shape "
            f"{tuple(target.shape)}"
        )


def s21_mae(pred: Tensor, target: Tensor) -> Tensor:
    """Mean complex modulus of the s21 error over all samples and frequencies.
    Inputs are S matrices of shape (..., n_points, 2, 2).
    """
    return torch.abs(pred[..., 1, 0] - target[..., 1, 0]).mean()


def phase_aware_error(pred: Tensor, target: Tensor) -> Tensor:
    """Mean of |s21 error|^2 + |s11 error|^2 over all samples and frequencies."""
    d21 = torch.view_as_real(pred[..., 1, 0] - target[..., 1, 0])
    d11 = torch.view_as_real(pred[..., 0, 0] - target[..., 0, 0])
    return (d21.pow(2).sum(dim=-1) + d11.pow(2).sum(dim=-1)).mean()


RESPONSE_LOSSES: Dict[str, Callable[[Tensor, Tensor], Tensor]] = {
    "eq1": s21_mae,
    "eq3": s21_mae,
    "eq5": phase_aware_error,
}


def get_response_loss(kind: str) -> Callable[[Tensor, Tensor], Tensor]:
    try:
        return RESPONSE_LOSSES[kind]
    except KeyError:
        raise ValueError(
            f"Unsupported S-parameter loss '{kind}'. "
            f"Supported: {', '.join(RESPONSE_LOSSES)}"
        )


def _check_responses(pred: SResponse, target: SResponse) -> None:
    if pred.grid != target.grid:
        raise ValueError(f"Grid mismatch: {pred.grid} vs {target.grid}")
    _check_same_shape(pred.s, target.s)


def loss_eq1(pred: SResponse, target: SResponse) -> Tensor:
    """Legacy transmission-only loss, kept for ablation."""
    _check_responses(pred, target)
    return s21_mae(pred.s, target.s)


def loss_eq2(
    pred: Tensor,
    target: Tensor,
    norm: CircuitNormalization,
    kind: str = "eq2",
) -> Tensor:
    """Circuit-parameter loss in normalized (log) units.  'eq2' is the mean squared
    l2 norm per sample; 'eq2-mae' is the mean absolute error over all entries.
    """
    _check_same_shape(pred, target)
    diff = norm.apply(pred) - norm.apply(target)
    if kind == "eq2":
        return diff.pow(2).sum(dim=-1).mean()
    elif kind == "eq2-mae":
        return diff.abs().mean()
    else:
        raise ValueError(
            f"Unsupported circuit loss '{kind}'. Supported: 'eq2', 'eq2-mae'"
        )


def loss_eq3(pred: SResponse, target: SResponse) -> Tensor:
    _check_responses(pred, target)
    return s21_mae(pred.s, target.s)


def loss_eq5(pred: SResponse, target: SResponse) -> Tensor:
    """Phase-aware loss.  The squared complex differences are read as squared
    moduli, which keeps the loss real and nonnegative.
    """
    _check_responses(pred, target)
    return phase_aware_error(pred.s, target.s)


def response_loss(kind: str, pred: SResponse, target: SResponse) -> Tensor:
    _check_responses(pred, target)
    return get_response_loss(kind)(pred.s, target.s)
