"""Touchstone v1 two-port (.s2p) reader and writer.

Data lines hold 'f s11 s21 s12 s22', two numbers per parameter.  The writer
always emits real/imaginary pairs with frequencies in GHz; the reader also
accepts magnitude/angle (MA) and dB/angle (DB) pairs and any frequency unit.
"""
import logging
from math import isclose
from typing import Iterable, List, Sequence, Tuple

import torch

from model_based_fss.circuit import DTYPE, Z0_FREE, FrequencyGrid, SResponse

logger = logging.getLogger(__name__)

FREQUENCY_UNITS = {"HZ": 1.0, "KHZ": 1e3, "MHZ": 1e6, "GHZ": 1e9}
DATA_FORMATS = ("RI", "MA", "DB")
NUM_COLUMNS = 9


class TouchstoneError(ValueError):
    def __init__(self, line_number: int, message: str) -> None:
        super().__init__(f"line {line_number}: {message}")
        self.line_number = line_number


def _parse_option_line(tokens: Sequence[str], line_number: int) -> Tuple[float, str, float]:
    unit, data_format, z0 = "GHZ", "MA", 50.0
    i = 0
    while i < len(tokens):
        token = tokens[i].upper()
        if token in FREQUENCY_UNITS:
            unit = token
        elif token in DATA_FORMATS:
            data_format = token
        elif token == "S":
            pass
        elif token in ("Y", "Z", "H", "G"):
            raise TouchstoneError(
                line_number, f"only S-parameter files are supported, got '{token}'"
            )
        elif token == "R":
            i += 1
            try:
                z0 = float(tokens[i])
            except (IndexError, ValueError):
                raise TouchstoneError(line_number, "'R' must be followed by a number")
            if not z0 > 0:
                raise TouchstoneError(line_number, f"reference impedance {z0} <= 0")
        else:
            raise TouchstoneError(line_number, f"unknown option '{tokens[i]}'")
        i += 1
    return FREQUENCY_UNITS[unit], data_format, z0


def _to_complex(first: torch.Tensor, second: torch.Tensor, data_format: str) -> torch.Tensor:
    if data_format == "RI":
        return torch.complex(first, second)
    magnitude = first if data_format == "MA" else torch.pow(10.0, first / 20)
    return torch.polar(magnitude, torch.deg2rad(second))


def parse_touchstone(text: str, z0: float = Z0_FREE) -> SResponse:
    """Parse two-port Touchstone text onto a uniform 'FrequencyGrid'.

    S-parameters are returned as stored.  They are not renormalized, so a file
    whose reference impedance differs from 'z0' is logged with a warning.
    """
    option = None
    frequencies: List[float] = []
    rows: List[List[float]] = []
    line_numbers: List[int] = []

    for line_number, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("!", 1)[0].strip()
        if not line:
            continue
        if line.startswith("#"):
            # Only the first option line counts.
            if option is None:
                option = _parse_option_line(line[1:].split(), line_number)
            continue

        tokens = line.split()
        if len(tokens) != NUM_COLUMNS:
            raise TouchstoneError(
                line_number, f"expected {NUM_COLUMNS} columns, got {len(tokens)}"
            )
        try:
            values = [float(token) for token in tokens]
        except ValueError as e:
            raise TouchstoneError(line_number, str(e))
        if frequencies and not values[0] > frequencies[-1]:
            raise TouchstoneError(
                line_number,
                f"frequencies must be strictly ascending ({values[0]} after "
                f"{frequencies[-1]})",
            )
        frequencies.append(values[0])
        rows.append(values[1:])
        line_numbers.append(line_number)

    scale, data_format, file_z0 = option or (1e9, "MA", 50.0)
    if not isclose(file_z0, z0, rel_tol=1e-9):
        logger.warning(
            "Touchstone reference impedance %.6g ohm differs from %.6g ohm; "
            "S-parameters are used without renormalization",
            file_z0,
            z0,
        )
    num_lines = len(text.splitlines())
    if len(rows) < 2:
        raise TouchstoneError(num_lines, "need at least two frequency points")

    f = torch.tensor(frequencies, dtype=DTYPE) * scale
    try:
        grid = FrequencyGrid(float(f[0]), float(f[-1]), len(f))
    except ValueError as e:
        raise TouchstoneError(line_numbers[0], str(e))
    spacing = (grid.f_stop - grid.f_start) / (grid.n_points - 1)
    for expected, actual, line_number in zip(grid.points().tolist(), f.tolist(), line_numbers):
        if not isclose(expected, actual, rel_tol=0, abs_tol=1e-6 * spacing):
            raise TouchstoneError(
                line_number, f"frequency {actual} Hz is off the uniform grid"
            )

    values = torch.tensor(rows, dtype=DTYPE)
    s11, s21, s12, s22 = (
        _to_complex(values[:, 2 * k], values[:, 2 * k + 1], data_format)
        for k in range(4)
    )
    top = torch.stack((s11, s12), dim=-1)
    bottom = torch.stack((s21, s22), dim=-1)
    return SResponse(grid, torch.stack((top, bottom), dim=-2))


def read_touchstone(path: str, z0: float = Z0_FREE) -> SResponse:
    with open(path) as f:
        return parse_touchstone(f.read(), z0)


def format_touchstone(
    response: SResponse, z0: float = Z0_FREE, comments: Iterable[str] = ()
) -> str:
    """RI pairs with frequencies in GHz.  Values carry 13 significant digits
    ('.12e'), more than the customary 9, so a read-back matches to ~1e-12.
    """
    if response.s.dim() != 3:
        raise ValueError("Touchstone files hold a single response, not a batch")
    lines = [f"! {comment}" for comment in comments]
    lines.append(f"# GHz S RI R {z0:.12g}")
    frequencies = (response.frequencies / 1e9).tolist()
    columns = (response.s11, response.s21, response.s12, response.s22)
    for j, f in enumerate(frequencies):
        values = []
        for column in columns:
            values.extend([column[j].real.item(), column[j].imag.item()])
        lines.append(" ".join([f"{f:.12g}"] + [f"{v: .12e}" for v in values]))
    return "\n".join(lines) + "\n"


def write_touchstone(
    response: SResponse, path: str, z0: float = Z0_FREE, comments: Iterable[str] = ()
) -> None:
    with open(path, "w") as f:
        f.write(format_touchstone(response, z0, comments))
