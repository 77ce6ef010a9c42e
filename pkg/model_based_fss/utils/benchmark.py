from math import ceil
from timeit import Timer
from typing import Callable, List, NamedTuple

import torch


class BenchmarkResult(NamedTuple):
    mean: float
    std: float

    def __str__(self):
        return f"({self.mean:.3e} ± {self.std:.3e}) s"


@torch.no_grad()
def benchmark(
    fn: Callable,
    *args,
    min_total_seconds: float = 1.0,
    min_iterations: int = 10,
    warmup: int = 3,
    **kwargs,
) -> BenchmarkResult:
    """Wall-clock time of 'fn(*args, **kwargs)'.  Repeats until the total time
    exceeds 'min_total_seconds' and at least 'min_iterations' runs are recorded.
    """
    if min_iterations < 2:
        raise ValueError("min_iterations must be >= 2")
    if min_total_seconds < 0:
        raise ValueError("min_total_seconds must be >= 0")

    timer = Timer("fn(*args, **kwargs)", globals={"fn": fn, "args": args, "kwargs": kwargs})
    if warmup > 0:
        timer.repeat(number=1, repeat=warmup)

    times: List[float] = []
    num_iterations = min_iterations
    while num_iterations > 0:
        times.extend(timer.repeat(number=1, repeat=num_iterations))
        times_tensor = torch.as_tensor(times, dtype=torch.float64)
        total_time = times_tensor.sum().item()
        avg_time = max(times_tensor.mean().item(), 1e-9)
        num_iterations = ceil((min_total_seconds - total_time) / avg_time)

    times_tensor = torch.as_tensor(times, dtype=torch.float64)
    return BenchmarkResult(
        mean=times_tensor.mean().item(),
        std=times_tensor.std().item(),
    )
