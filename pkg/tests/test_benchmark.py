import pytest
import torch

from model_based_fss.circuit import FrequencyGrid, Topology, f_phys
from model_based_fss.utils.benchmark import BenchmarkResult, benchmark


def test_benchmark_f_phys():
    params = torch.tensor([2e-9, 5e-14, 2e-9, 5e-14], dtype=torch.float64)
    result = benchmark(
        f_phys,
        params,
        Topology.default(),
        FrequencyGrid(n_points=11),
        min_total_seconds=0.0,
        min_iterations=3,
        warmup=1,
    )
    assert isinstance(result, BenchmarkResult)
    assert result.mean > 0 and result.std >= 0
    assert str(result).endswith(" s")


def test_benchmark_validation():
    with pytest.raises(ValueError):
        benchmark(sum, [1, 2], min_iterations=1)
    with pytest.raises(ValueError):
        benchmark(sum, [1, 2], min_total_seconds=-1.0)
