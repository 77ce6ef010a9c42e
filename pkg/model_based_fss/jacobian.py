"""Exact derivatives of the circuit physics with respect to circuit parameters.

Derivatives are forward-mode: 'torch.func.jacfwd' pushes one dual tangent per
circuit parameter through the complex arithmetic of '_cascade_response'
(admittances, line sections, the cascade and the ABCD -> S division).  N_c is
small, so this is cheaper than building a reverse-mode tape through the complex
matrix algebra.  End-to-end gradients for training are composed by the caller
as (dc/dtheta)^T @ (dLoss/dc), see 'model_based_fss.training'.
"""
from math import prod
from typing import NamedTuple, Optional, Tuple

import torch
from torch import Tensor
from torch.func import jacfwd, vmap

from model_based_fss.circuit import (
    DTYPE,
    Z0_FREE,
    FrequencyGrid,
    SResponse,
    Topology,
    _cascade_response,
    check_circuit_params,
    check_spacer_lengths,
    f_phys,
    response_components,
)
from model_based_fss.losses import get_response_loss

FD_FLOOR = 1e-12
FD_NORMALIZATIONS = ("column", "entry")


class PhysicsJacobian(NamedTuple):
    """d[Re s11, Im s11, Re s21, Im s21] / dc with shape (..., n_points, 4, N_c),
    in units of S-parameter per unit (H or F) of each circuit parameter.
    """

    grid: FrequencyGrid
    entries: Tensor

    def scaled(self, params: Tensor) -> Tensor:
        """Sensitivities per *relative* change of each parameter (c_k * dS/dc_k)."""
        return self.entries * params[..., None, None, :]


def _flatten_inputs(
    params: Tensor, topology: Topology, spacer_lengths: Optional[Tensor]
) -> Tuple[Tuple[int, ...], Tensor, Tensor]:
    num_spacers = len(topology.spacers)
    if spacer_lengths is None:
        spacer_lengths = torch.tensor(
            [spacer.length for spacer in topology.spacers], dtype=DTYPE
        ).reshape(num_spacers)
    batch_shape = torch.broadcast_shapes(params.shape[:-1], spacer_lengths.shape[:-1])
    num_samples = prod(batch_shape)
    flat_params = params.expand(*batch_shape, params.shape[-1]).reshape(
        num_samples, params.shape[-1]
    )
    flat_lengths = spacer_lengths.expand(*batch_shape, num_spacers).reshape(
        num_samples, num_spacers
    )
    return tuple(batch_shape), flat_params, flat_lengths


def f_phys_dual(
    params: Tensor,
    topology: Topology,
    grid: Optional[FrequencyGrid] = None,
    z0_free: float = Z0_FREE,
    spacer_lengths: Optional[Tensor] = None,
) -> Tuple[SResponse, PhysicsJacobian]:
    grid = grid or FrequencyGrid()
    response = f_phys(params, topology, grid, z0_free, spacer_lengths)
    params = check_circuit_params(params, topology)
    spacer_lengths = check_spacer_lengths(spacer_lengths, topology)
    frequencies = grid.points()

    def components(p: Tensor, lengths: Tensor) -> Tensor:
        s = _cascade_response(p, topology, frequencies, z0_free, lengths)
        return response_components(s)

    batch_shape, flat_params, flat_lengths = _flatten_inputs(
        params, topology, spacer_lengths
    )
    entries = vmap(jacfwd(components, argnums=0))(flat_params, flat_lengths)
    entries = entries.reshape(
        *batch_shape, grid.n_points, 4, topology.num_circuit_params
    )
    return response, PhysicsJacobian(grid, entries)


def loss_grad_circuit(
    params: Tensor,
    target: SResponse,
    topology: Topology,
    grid: Optional[FrequencyGrid] = None,
    loss_kind: str = "eq3",
    z0_free: float = Z0_FREE,
    spacer_lengths: Optional[Tensor] = None,
) -> Tuple[Tensor, Tensor]:
    """Loss of f_phys(params) against 'target', and its exact gradient with respect
    to 'params' (same shape as 'params').  The loss is averaged over samples and
    frequencies, so the per-sample gradients are scaled by 1 / n_samples.
    """
    grid = grid or target.grid
    if target.grid != grid:
        raise ValueError(f"Target grid {target.grid} does not match {grid}")
    params = check_circuit_params(params, topology)
    spacer_lengths = check_spacer_lengths(spacer_lengths, topology)
    if params.shape[:-1] != target.s.shape[:-3]:
        raise ValueError(
            f"Batch shape of params {tuple(params.shape[:-1])} does not match "
            f"target {tuple(target.s.shape[:-3])}"
        )
    loss_fn = get_response_loss(loss_kind)
    frequencies = grid.points()

    def sample_loss(p: Tensor, lengths: Tensor, s_target: Tensor):
        s = _cascade_response(p, topology, frequencies, z0_free, lengths)
        loss = loss_fn(s, s_target)
        return loss, loss

    batch_shape, flat_params, flat_lengths = _flatten_inputs(
        params, topology, spacer_lengths
    )
    flat_target = target.s.reshape(-1, grid.n_points, 2, 2)
    grads, losses = vmap(jacfwd(sample_loss, argnums=0, has_aux=True))(
        flat_params, flat_lengths, flat_target
    )
    num_samples = flat_params.shape[0]
    loss = losses.mean()
    grad = (grads / num_samples).reshape(*batch_shape, params.shape[-1])
    return loss, grad


def finite_diff_check(
    params: Tensor,
    topology: Topology,
    grid: Optional[FrequencyGrid] = None,
    step: float = 1e-6,
    z0_free: float = Z0_FREE,
    normalize: str = "column",
) -> float:
    """Max relative deviation between the forward-mode Jacobian and central
    differences with relative step 'step'.

    normalize="column" measures each deviation against the peak magnitude of its
    Jacobian column, so entries that cross zero along the frequency axis do not
    dominate.  normalize="entry" divides by max(|analytic entry|, FD_FLOOR).
    Both floors are FD_FLOOR, and "entry" is never below "column".
    """
    if not 1e-9 <= step <= 1e-3:
        raise ValueError(f"step must lie in [1e-9, 1e-3], got {step}")
    if normalize not in FD_NORMALIZATIONS:
        raise ValueError(
            f"Unsupported normalize '{normalize}'. "
            f"Supported: {', '.join(FD_NORMALIZATIONS)}"
        )
    grid = grid or FrequencyGrid()
    params = check_circuit_params(params, topology)
    if params.dim() != 1:
        raise ValueError("finite_diff_check() expects a single parameter vector")

    _, jacobian = f_phys_dual(params, topology, grid, z0_free)
    analytic = jacobian.entries
    numeric = torch.empty_like(analytic)
    for k in range(params.shape[-1]):
        plus, minus = params.clone(), params.clone()
        plus[k] = params[k] * (1 + step)
        minus[k] = params[k] * (1 - step)
        s_plus = response_components(f_phys(plus, topology, grid, z0_free).s)
        s_minus = response_components(f_phys(minus, topology, grid, z0_free).s)
        numeric[..., k] = (s_plus - s_minus) / (plus[k] - minus[k])

    if normalize == "entry":
        scale = analytic.abs().clamp_min(FD_FLOOR)
    else:
        scale = analytic.abs().amax(dim=(0, 1)).clamp_min(FD_FLOOR)
    return float(((analytic - numeric).abs() / scale).max())
