import os
from typing import List, Sequence, Tuple

import plotly.graph_objects as go
import torch

from model_based_fss.circuit import DTYPE, FrequencyGrid, Topology, f_phys
from model_based_fss.jacobian import f_phys_dual
from model_based_fss.utils.benchmark import benchmark

BATCH_SIZES = [1, 8, 64, 256, 729, 2048]
GRID = FrequencyGrid()
TOPOLOGY = Topology.default()


def random_circuit_params(batch_size: int, seed: int = 0) -> torch.Tensor:
    """Log-uniform L in [0.1, 10] nH and C in [0.01, 1] pF per screen."""
    generator = torch.Generator().manual_seed(seed)
    u = torch.rand(batch_size, TOPOLOGY.num_circuit_params, generator=generator, dtype=DTYPE)
    low = torch.tensor([1e-10, 1e-14] * len(TOPOLOGY.screens), dtype=DTYPE)
    high = torch.tensor([1e-8, 1e-12] * len(TOPOLOGY.screens), dtype=DTYPE)
    return torch.exp(torch.log(low) + u * (torch.log(high) - torch.log(low)))


def benchmark_physics(batch_sizes: Sequence[int]) -> Tuple[List[float], List[float]]:
    value_times: List[float] = []
    dual_times: List[float] = []

    print("\nBenchmarking f_phys / f_phys_dual...")
    for batch_size in batch_sizes:
        params = random_circuit_params(batch_size)
        value_result = benchmark(f_phys, params, TOPOLOGY, GRID)
        dual_result = benchmark(f_phys_dual, params, TOPOLOGY, GRID)
        print(f"batch_size: {batch_size}, f_phys: {value_result}, f_phys_dual: {dual_result}")
        value_times.append(value_result.mean)
        dual_times.append(dual_result.mean)

    return value_times, dual_times


if __name__ == "__main__":
    value_times, dual_times = benchmark_physics(BATCH_SIZES)

    fig = go.Figure()
    for name, times, color in (
        ("f_phys", value_times, "blue"),
        ("f_phys_dual", dual_times, "red"),
    ):
        fig.add_trace(
            go.Scatter(
                x=BATCH_SIZES,
                y=times,
                name=name,
                mode="lines+markers",
                line={"color": color},
                marker={"color": color},
            )
        )
    fig.update_layout(
        title=f"Circuit physics runtime ({GRID.n_points} frequencies)",
        xaxis_title="Batch Size",
        yaxis_title="Runtime (s)",
        xaxis={"type": "log"},
        yaxis={"type": "log"},
        legend={"x": 0.1, "y": 0.9},
    )
    os.makedirs("doc", exist_ok=True)
    fig.write_image(os.path.join("doc", "physics-runtime.png"))
