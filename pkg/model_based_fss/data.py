import itertools
import json
import logging
from dataclasses import dataclass, field, replace
from math import floor, log, pi, prod
from typing import Any, Dict, List, NamedTuple, Optional, Sequence, Tuple

import numpy as np
import torch
from scipy.optimize import least_squares
from torch import Tensor
from tqdm import tqdm

from model_based_fss.circuit import (
    DTYPE,
    SPEED_OF_LIGHT,
    Z0_FREE,
    FrequencyGrid,
    SResponse,
    Topology,
    abcd_line,
    abcd_shunt,
    abcd_to_s,
    admittance,
    cascade,
    check_circuit_params,
    f_phys,
    resonance_frequency,
)
from model_based_fss.jacobian import f_phys_dual

logger = logging.getLogger(__name__)

DATASET_FORMAT_VERSION = 1
GEOMETRY_FIELDS = ("slot_length", "separation", "slot_length_2")

# Surrogate geometry -> circuit formulas.  Slots resonate at half a free-space
# wavelength; the resonator impedance sqrt(L/C) grows as the screens move closer.
RESONATOR_IMPEDANCE = 60.0  # ohm, at the reference separation
REFERENCE_SEPARATION = 9.5  # mm
COUPLING_EXPONENT = 1.5
SECOND_RESONANCE_RATIOS = (1.8, 2.0)

# Extraction seeding: (f0, sqrt(L/C)) grid points, then zoomed grids.
SEED_GRID = (33, 25)
SEED_ZOOM_GRID = (11, 11)
SEED_REFINEMENTS = 2
SEED_IMPEDANCE_RANGE = (1.0, 3000.0)  # ohm
SEED_DETUNING = 0.01
# Each fit stays within this many decades of its start point.
SEARCH_DECADES = 2.0


class Geometry(NamedTuple):
    """FSS geometry in millimeters."""

    slot_length: float
    separation: float
    slot_length_2: float

    def as_tensor(self) -> Tensor:
        return torch.tensor(self, dtype=DTYPE)


SweepRange = Tuple[float, float, int]


@dataclass(frozen=True)
class SweepSpec:
    """Full-factorial geometry sweep plus the surrogate oracle's settings.

    'alpha' scales the dispersive screen capacitance C(f) = C (1 + alpha (f/f_max)^2)
    and 'second_resonance' the strength of a weak higher-order resonance.  Both
    at zero give the unperturbed oracle, which the circuit model fits exactly.
    """

    slot_length: SweepRange = (14.75, 14.9, 9)
    separation: SweepRange = (8.79, 10.3, 9)
    slot_length_2: SweepRange = (14.75, 14.9, 9)
    grid: FrequencyGrid = field(default_factory=FrequencyGrid)
    alpha: float = 0.05
    second_resonance: float = 0.03
    seed: int = 0

    def __post_init__(self) -> None:
        for name, (low, high, levels) in zip(GEOMETRY_FIELDS, self.ranges):
            if int(levels) < 1:
                raise ValueError(f"{name}: n_levels must be >= 1, got {levels}")
            if not 0 < low <= high:
                raise ValueError(f"{name}: expected 0 < min <= max, got {low}, {high}")
        if self.alpha < 0 or self.second_resonance < 0:
            raise ValueError("alpha and second_resonance must be >= 0")

    @property
    def ranges(self) -> Tuple[SweepRange, SweepRange, SweepRange]:
        return (self.slot_length, self.separation, self.slot_length_2)

    @property
    def num_samples(self) -> int:
        return prod(int(levels) for _, _, levels in self.ranges)

    def with_levels(self, levels: Sequence[int]) -> "SweepSpec":
        if len(levels) != 3:
            raise ValueError(f"Expected 3 sweep levels, got {len(levels)}")
        updated = {
            name: (low, high, int(n))
            for name, (low, high, _), n in zip(GEOMETRY_FIELDS, self.ranges, levels)
        }
        return replace(self, **updated)

    def unperturbed(self) -> "SweepSpec":
        return replace(self, alpha=0.0, second_resonance=0.0)

    def to_dict(self) -> Dict[str, Any]:
        return {
            **{name: list(r) for name, r in zip(GEOMETRY_FIELDS, self.ranges)},
            "grid": self.grid.to_dict(),
            "alpha": self.alpha,
            "second_resonance": self.second_resonance,
            "seed": self.seed,
        }

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> "SweepSpec":
        ranges = {
            name: (float(data[name][0]), float(data[name][1]), int(data[name][2]))
            for name in GEOMETRY_FIELDS
        }
        return cls(
            **ranges,
            grid=FrequencyGrid.from_dict(data["grid"]),
            alpha=float(data["alpha"]),
            second_resonance=float(data["second_resonance"]),
            seed=int(data["seed"]),
        )


def _levels(low: float, high: float, n: int) -> List[float]:
    if n == 1:
        return [low]
    return [low + i * (high - low) / (n - 1) for i in range(n)]


def generate_sweep(spec: SweepSpec) -> List[Geometry]:
    """Full factorial grid in lexicographic order: 'slot_length' varies slowest,
    'slot_length_2' fastest.
    """
    axes = [_levels(low, high, int(n)) for low, high, n in spec.ranges]
    return [Geometry(*values) for values in itertools.product(*axes)]


def in_bounds(x: Geometry, spec: SweepSpec) -> bool:
    return all(low <= value <= high for value, (low, high, _) in zip(x, spec.ranges))


def true_circuit_params(x: Geometry) -> Tensor:
    """The surrogate's 'true' [L_1, C_1, L_2, C_2] for a geometry."""
    impedance = RESONATOR_IMPEDANCE * (
        REFERENCE_SEPARATION / x.separation
    ) ** COUPLING_EXPONENT
    params = []
    for slot in (x.slot_length, x.slot_length_2):
        f0 = SPEED_OF_LIGHT / (2 * slot * 1e-3)
        omega0 = 2 * pi * f0
        params.extend([impedance / omega0, 1 / (omega0 * impedance)])
    return torch.tensor(params, dtype=DTYPE)


def _second_resonance_ratios(seed: int) -> Tensor:
    low, high = SECOND_RESONANCE_RATIOS
    generator = torch.Generator().manual_seed(seed)
    return low + (high - low) * torch.rand(2, generator=generator, dtype=DTYPE)


def oracle_simulate(x: Geometry, spec: Optional[SweepSpec] = None) -> SResponse:
    """Deterministic stand-in for a full-wave simulation of the two-screen FSS.

    Each screen is a shunt parallel-LC whose capacitance is mildly dispersive, in
    parallel with a weak series-LC branch resonating above the band.  Every
    branch is reactive, so the response is lossless.
    """
    spec = spec or SweepSpec()
    if not in_bounds(x, spec):
        logger.warning("Geometry %s lies outside the sweep bounds; extrapolating", x)

    frequencies = spec.grid.points()
    params = true_circuit_params(x)
    ratios = _second_resonance_ratios(spec.seed)
    elements = []
    for k in range(2):
        inductance, capacitance = params[2 * k], params[2 * k + 1]
        dispersive = capacitance * (
            1 + spec.alpha * (frequencies / spec.grid.f_stop) ** 2
        )
        y = admittance("parallel-lc", inductance, dispersive, frequencies)
        if spec.second_resonance > 0:
            f2 = ratios[k] * resonance_frequency(inductance, capacitance)
            impedance = torch.sqrt(inductance / capacitance) / spec.second_resonance
            y = y + admittance(
                "series-lc",
                impedance / (2 * pi * f2),
                1 / (2 * pi * f2 * impedance),
                frequencies,
            )
        elements.append(abcd_shunt(y))
        if k == 0:
            elements.append(abcd_line(x.separation * 1e-3, 1.0, frequencies))

    return SResponse(spec.grid, abcd_to_s(cascade(elements), Z0_FREE))


def _shared_resonance_params(
    f0: Tensor, impedance: Tensor, num_screens: int
) -> Tensor:
    """Every (f0, sqrt(L/C)) pair of the outer product, repeated for each screen:
    shape (len(f0) * len(impedance), 2 * num_screens).
    """
    omega0 = 2 * pi * f0[:, None]
    inductance = (impedance[None, :] / omega0).reshape(-1)
    capacitance = (1 / (omega0 * impedance[None, :])).reshape(-1)
    return torch.stack((inductance, capacitance), dim=-1).repeat(1, num_screens)


def seed_circuit_params(
    s: SResponse, topology: Topology, z0_free: float = Z0_FREE
) -> Tensor:
    """Starting point for extraction: grid search over a resonance frequency and
    characteristic impedance sqrt(L/C) shared by every screen, matching s21 in
    mean absolute error.  Each round zooms in on the best cell of the last.
    """
    if s.s.dim() != 3:
        raise ValueError("seed_circuit_params() expects a single response")
    num_f, num_z = SEED_GRID
    f_low, f_high = s.grid.f_start, s.grid.f_stop
    log_z_low, log_z_high = (log(z) for z in SEED_IMPEDANCE_RANGE)
    for _ in range(1 + SEED_REFINEMENTS):
        f0 = torch.linspace(f_low, f_high, num_f, dtype=DTYPE)
        impedance = torch.exp(torch.linspace(log_z_low, log_z_high, num_z, dtype=DTYPE))
        candidates = _shared_resonance_params(f0, impedance, len(topology.screens))
        pred = f_phys(candidates, topology, s.grid, z0_free).s21
        best = int(torch.argmin((pred - s.s21).abs().mean(dim=-1)))
        i, j = divmod(best, num_z)
        f_step = (f_high - f_low) / (num_f - 1)
        z_step = (log_z_high - log_z_low) / (num_z - 1)
        center_f, center_z = float(f0[i]), log(float(impedance[j]))
        f_low, f_high = max(center_f - f_step, center_f / 2), center_f + f_step
        log_z_low, log_z_high = center_z - z_step, center_z + z_step
        num_f, num_z = SEED_ZOOM_GRID
    return candidates[best]


def _detuned_starts(seed: Tensor, num_screens: int) -> List[Tensor]:
    """Neighboring screens pushed apart in resonance frequency, once each way.
    Equal screens give s21 equal sensitivity to both, so the fit needs to start
    off that symmetric point.
    """
    if num_screens < 2:
        return [seed]
    signs = torch.tensor([(-1.0) ** k for k in range(num_screens)], dtype=DTYPE)
    starts = []
    for direction in (1.0, -1.0):
        # f0 -> a * f0 at fixed sqrt(L/C) scales both L and C by 1 / a
        factor = 1 + SEED_DETUNING * direction * signs
        starts.append(seed * (1 / factor).repeat_interleave(2))
    return starts


class ExtractionResult(NamedTuple):
    params: Tensor
    residual: float  # mean |s21 - fitted s21|
    converged: bool
    evaluations: int


class _BestIterate:
    def __init__(self) -> None:
        self.cost = float("inf")
        self.theta: Optional[np.ndarray] = None
        self.run = -1

    def update(self, theta: np.ndarray, residuals: np.ndarray, run: int) -> None:
        cost = 0.5 * float(residuals @ residuals)
        if np.isfinite(cost) and cost < self.cost:
            self.cost, self.theta, self.run = cost, theta.copy(), run


def _reverse_screens(params: Tensor) -> Tensor:
    return params.reshape(-1, 2).flip(0).reshape(-1)


def extract_circuit_params(
    s: SResponse,
    topology: Topology,
    grid: Optional[FrequencyGrid] = None,
    init: Optional[Tensor] = None,
    max_evaluations: int = 5000,
    gtol: float = 1e-9,
    z0_free: float = Z0_FREE,
) -> ExtractionResult:
    """Least-squares fit of circuit parameters to the s21 of a single response.

    The fit runs in log-parameter space with a bounded trust-region solver,
    using the forward-mode Jacobian of the physics.  Without 'init' it starts
    from 'seed_circuit_params', detuned so that neighboring screens differ, and
    keeps the best of the runs.  Failed runs never raise: the best iterate seen
    is returned with 'converged=False'.  s21 alone cannot tell a palindromic
    structure from its mirror image, so for palindromic topologies the screen
    order that better matches s11 is kept.
    """
    grid = grid or s.grid
    if s.grid != grid:
        raise ValueError(f"Response grid {s.grid} does not match {grid}")
    if s.s.dim() != 3:
        raise ValueError("extract_circuit_params() expects a single response")
    if init is None:
        seed = seed_circuit_params(s, topology, z0_free)
        starts = _detuned_starts(seed, len(topology.screens))
    else:
        starts = [check_circuit_params(init, topology)]
    target = s.s21
    num_params = topology.num_circuit_params
    best = _BestIterate()
    statuses: Dict[int, bool] = {}
    evaluations = 0

    for run, start in enumerate(starts):

        def residuals(theta: np.ndarray, run: int = run) -> np.ndarray:
            params = torch.from_numpy(np.exp(theta))
            pred = f_phys(params, topology, grid, z0_free).s21
            values = torch.view_as_real(pred - target).reshape(-1).numpy()
            best.update(theta, values, run)
            return values

        def jacobian(theta: np.ndarray) -> np.ndarray:
            params = torch.from_numpy(np.exp(theta))
            _, jac = f_phys_dual(params, topology, grid, z0_free)
            return jac.scaled(params)[:, 2:4, :].reshape(-1, num_params).numpy()

        theta0 = np.log(start.numpy())
        radius = SEARCH_DECADES * log(10)
        try:
            result = least_squares(
                residuals,
                theta0,
                jac=jacobian,
                bounds=(theta0 - radius, theta0 + radius),
                method="trf",
                x_scale="jac",
                ftol=1e-15,
                xtol=1e-15,
                gtol=gtol,
                max_nfev=max_evaluations,
            )
        except (ValueError, ArithmeticError) as e:
            logger.warning("Circuit extraction run %d failed: %s", run, e)
            statuses[run] = False
            continue
        statuses[run] = bool(result.status > 0)
        evaluations += int(result.nfev)

    if best.theta is None:
        params = starts[0]
    else:
        params = torch.from_numpy(np.exp(best.theta))

    if topology.is_palindrome and len(topology.screens) > 1:
        mirrored = _reverse_screens(params)
        error = (f_phys(params, topology, grid, z0_free).s11 - s.s11).abs().mean()
        mirrored_error = (
            (f_phys(mirrored, topology, grid, z0_free).s11 - s.s11).abs().mean()
        )
        if mirrored_error < error:
            params = mirrored

    residual = float((f_phys(params, topology, grid, z0_free).s21 - target).abs().mean())
    converged = statuses.get(best.run, False)
    if not converged:
        logger.warning(
            "Circuit extraction did not converge after %d evaluations "
            "(residual %.3e); returning the best iterate",
            evaluations,
            residual,
        )
    return ExtractionResult(params, residual, converged, evaluations)


class Sample(NamedTuple):
    id: int
    x: Geometry
    c: Tensor
    s: SResponse
    residual: float = 0.0


@dataclass
class FSSDataset:
    spec: SweepSpec
    topology: Topology
    samples: List[Sample]

    def __len__(self) -> int:
        return len(self.samples)

    @property
    def grid(self) -> FrequencyGrid:
        return self.spec.grid

    def geometries(self) -> Tensor:
        return torch.tensor([sample.x for sample in self.samples], dtype=DTYPE)

    def circuit_params(self) -> Tensor:
        return torch.stack([sample.c for sample in self.samples])

    def responses(self) -> SResponse:
        return SResponse(self.grid, torch.stack([sample.s.s for sample in self.samples]))

    def spacer_lengths(self) -> Tensor:
        """Per-sample spacer lengths (m): every spacer takes the swept separation."""
        separation = self.geometries()[:, 1:2] * 1e-3
        return separation.expand(-1, len(self.topology.spacers)).contiguous()

    def subset(self, indices: Sequence[int]) -> "FSSDataset":
        return FSSDataset(self.spec, self.topology, [self.samples[i] for i in indices])


def sample_topology(x: Geometry, topology: Topology) -> Topology:
    return topology.with_spacer_lengths([x.separation * 1e-3] * len(topology.spacers))


def build_dataset(
    spec: Optional[SweepSpec] = None,
    topology: Optional[Topology] = None,
    progress: bool = False,
) -> FSSDataset:
    """Sweep -> oracle -> circuit extraction for every geometry."""
    spec = spec or SweepSpec()
    topology = topology or Topology.default()
    samples = []
    for i, x in enumerate(tqdm(generate_sweep(spec), desc="gen-data", disable=not progress)):
        s = oracle_simulate(x, spec)
        result = extract_circuit_params(s, sample_topology(x, topology))
        samples.append(Sample(i, x, result.params, s, result.residual))
    return FSSDataset(spec, topology, samples)


def split(
    dataset: FSSDataset, train_fraction: float, seed: int = 0
) -> Tuple[FSSDataset, FSSDataset]:
    """Seeded shuffle, then the first floor(fraction * n) samples (at least one)
    go to the training split.
    """
    if not 0 < train_fraction < 1:
        raise ValueError(f"train_fraction must lie in (0, 1), got {train_fraction}")
    n = len(dataset)
    if n == 0:
        raise ValueError("Cannot split an empty dataset")
    num_train = max(1, floor(train_fraction * n))
    if n > 1:
        num_train = min(num_train, n - 1)
    generator = torch.Generator().manual_seed(seed)
    permutation = torch.randperm(n, generator=generator)
    train_idx = sorted(permutation[:num_train].tolist())
    test_idx = sorted(permutation[num_train:].tolist())
    return dataset.subset(train_idx), dataset.subset(test_idx)


def holdout(
    train: FSSDataset, validation_fraction: float, seed: int = 0
) -> Tuple[FSSDataset, FSSDataset]:
    """Carve a seeded validation subset out of a training split.

    Returns (fit, validation).  The validation split is empty when the fraction
    is 0 or the training split has a single sample.
    """
    if not 0 <= validation_fraction < 1:
        raise ValueError(
            f"validation_fraction must lie in [0, 1), got {validation_fraction}"
        )
    if validation_fraction == 0 or len(train) < 2:
        return train, train.subset([])
    return split(train, 1 - validation_fraction, seed)


class DatasetFormatError(ValueError):
    pass


def _encode_response(s: Tensor) -> Dict[str, Dict[str, List[float]]]:
    names = {"s11": (0, 0), "s21": (1, 0), "s12": (0, 1), "s22": (1, 1)}
    return {
        name: {"re": s[:, i, j].real.tolist(), "im": s[:, i, j].imag.tolist()}
        for name, (i, j) in names.items()
    }


def _decode_response(data: Dict[str, Any], grid: FrequencyGrid) -> SResponse:
    def component(name: str) -> Tensor:
        re = torch.tensor(data[name]["re"], dtype=DTYPE)
        im = torch.tensor(data[name]["im"], dtype=DTYPE)
        if re.shape != (grid.n_points,) or im.shape != (grid.n_points,):
            raise DatasetFormatError(
                f"'{name}' must hold {grid.n_points} values, got {tuple(re.shape)}"
            )
        return torch.complex(re, im)

    top = torch.stack((component("s11"), component("s12")), dim=-1)
    bottom = torch.stack((component("s21"), component("s22")), dim=-1)
    return SResponse(grid, torch.stack((top, bottom), dim=-2))


def write_dataset(
    dataset: FSSDataset, path: str, config: Optional[Dict[str, Any]] = None
) -> None:
    if len(dataset) == 0:
        raise ValueError("Refusing to write an empty dataset")
    document = {
        "format_version": DATASET_FORMAT_VERSION,
        "sweep": dataset.spec.to_dict(),
        "grid": dataset.grid.to_dict(),
        "topology": dataset.topology.to_dict(),
        "config": config or {},
        "samples": [
            {
                "id": sample.id,
                "x": list(sample.x),
                "c": sample.c.tolist(),
                "residual": sample.residual,
                "s": _encode_response(sample.s.s),
            }
            for sample in dataset.samples
        ],
    }
    with open(path, "w") as f:
        json.dump(document, f)


def read_dataset(path: str) -> FSSDataset:
    try:
        with open(path) as f:
            document = json.load(f)
    except json.JSONDecodeError as e:
        raise DatasetFormatError(f"Invalid or truncated dataset file {path}: {e}")

    if not isinstance(document, dict):
        raise DatasetFormatError(f"{path}: expected a JSON object")
    version = document.get("format_version")
    if version != DATASET_FORMAT_VERSION:
        raise DatasetFormatError(
            f"{path}: unsupported format_version {version!r}, "
            f"expected {DATASET_FORMAT_VERSION}"
        )
    try:
        spec = SweepSpec.from_dict(document["sweep"])
        grid = FrequencyGrid.from_dict(document["grid"])
        if grid != spec.grid:
            raise DatasetFormatError(f"{path}: grid does not match the sweep grid")
        topology = Topology.from_dict(document["topology"])
        samples = []
        for entry in document["samples"]:
            c = torch.tensor(entry["c"], dtype=DTYPE)
            if c.shape != (topology.num_circuit_params,):
                raise DatasetFormatError(
                    f"{path}: sample {entry['id']} has {c.numel()} circuit params, "
                    f"expected {topology.num_circuit_params}"
                )
            samples.append(
                Sample(
                    id=int(entry["id"]),
                    x=Geometry(*map(float, entry["x"])),
                    c=c,
                    s=_decode_response(entry["s"], grid),
                    residual=float(entry["residual"]),
                )
            )
    except (KeyError, TypeError, ValueError) as e:
        if isinstance(e, DatasetFormatError):
            raise
        raise DatasetFormatError(f"{path}: schema violation ({e!r})") from e

    if not samples:
        raise DatasetFormatError(f"{path}: dataset has no samples")
    return FSSDataset(spec, topology, samples)
