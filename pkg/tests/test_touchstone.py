import logging
import math

import pytest
import torch

from model_based_fss.circuit import FrequencyGrid, SResponse, Topology, f_phys
from model_based_fss.data import Geometry, true_circuit_params
from model_based_fss.touchstone import (
    TouchstoneError,
    format_touchstone,
    parse_touchstone,
    read_touchstone,
    write_touchstone,
)

GRID = FrequencyGrid()
RESPONSE = f_phys(true_circuit_params(Geometry(14.8, 9.5, 14.85)), Topology.default(), GRID)

TWO_POINTS = """\
! two-point file
# MHz S RI R 50
1000 0.1 0.2 0.3 0.4 0.3 0.4 0.1 0.2
2000 0.5 0.6 0.7 0.8 0.7 0.8 0.5 0.6
"""


def test_round_trip(tmp_path):
    path = str(tmp_path / "response.s2p")
    write_touchstone(RESPONSE, path, comments=["geometry (mm): [14.8, 9.5, 14.85]"])
    restored = read_touchstone(path)
    assert restored.grid == GRID
    assert (restored.s - RESPONSE.s).abs().max().item() < 1e-9


def test_format_header():
    text = format_touchstone(RESPONSE, comments=["first", "second"])
    lines = text.splitlines()
    assert lines[:2] == ["! first", "! second"]
    assert lines[2].startswith("# GHz S RI R 376.73")
    assert len(lines) == 3 + GRID.n_points
    assert lines[3].split()[0] == "6"
    with pytest.raises(ValueError):
        format_touchstone(SResponse(GRID, RESPONSE.s[None]))


def test_parse_units_and_column_order():
    response = parse_touchstone(TWO_POINTS)
    assert response.grid == FrequencyGrid(1e9, 2e9, 2)
    assert response.s11[0].item() == pytest.approx(0.1 + 0.2j)
    assert response.s21[0].item() == pytest.approx(0.3 + 0.4j)
    assert response.s12[1].item() == pytest.approx(0.7 + 0.8j)
    assert response.s22[1].item() == pytest.approx(0.5 + 0.6j)


def test_comments_anywhere():
    text = TWO_POINTS.replace("1000 ", "! interleaved\n1000 ").replace(
        "0.2\n2000", "0.2 ! trailing\n2000"
    )
    torch.testing.assert_close(parse_touchstone(text).s, parse_touchstone(TWO_POINTS).s)


def test_magnitude_angle_formats():
    ma = "# GHz S MA R 50\n1 1 90 0.5 180 0.5 180 1 90\n2 1 0 1 0 1 0 1 0\n"
    response = parse_touchstone(ma)
    assert response.s11[0].item() == pytest.approx(1j, abs=1e-15)
    assert response.s21[0].item() == pytest.approx(-0.5, abs=1e-15)

    db = "# Hz S DB\n1e9 -6.020599913279624 0 0 0 0 0 0 0\n2e9 0 0 0 0 0 0 0 0\n"
    response = parse_touchstone(db)
    assert response.s11[0].item() == pytest.approx(0.5, rel=1e-12)
    assert response.s21[0].item() == pytest.approx(1.0)


def test_default_option_line():
    # Without an option line the format is GHz, MA.
    response = parse_touchstone("1 1 180 1 0 1 0 1 180\n2 1 0 1 0 1 0 1 0\n")
    assert response.grid == FrequencyGrid(1e9, 2e9, 2)
    assert response.s11[0].item() == pytest.approx(-1, abs=1e-15)


def test_reference_impedance_mismatch_is_logged(caplog):
    with caplog.at_level(logging.WARNING, logger="model_based_fss.touchstone"):
        response = parse_touchstone(TWO_POINTS)
    assert "50 ohm differs from 376.73" in caplog.text
    assert response.s11[0].item() == pytest.approx(0.1 + 0.2j)

    caplog.clear()
    with caplog.at_level(logging.WARNING, logger="model_based_fss.touchstone"):
        parse_touchstone(TWO_POINTS, z0=50.0)
        parse_touchstone(format_touchstone(RESPONSE))
    assert caplog.text == ""


@pytest.mark.parametrize(
    "text, line_number",
    [
        ("# GHz S RI\n1 0 0 0 0 0 0 0\n2 0 0 0 0 0 0 0 0\n", 2),
        ("# GHz S RI\n2 0 0 0 0 0 0 0 0\n1 0 0 0 0 0 0 0 0\n", 3),
        ("# GHz Y RI\n1 0 0 0 0 0 0 0 0\n2 0 0 0 0 0 0 0 0\n", 1),
        ("# GHz S RI R -50\n1 0 0 0 0 0 0 0 0\n2 0 0 0 0 0 0 0 0\n", 1),
        ("# GHz S RI\n1 0 0 0 0 0 0 0 x\n2 0 0 0 0 0 0 0 0\n", 2),
        ("! header\n# GHz S RI\n1 0 0 0 0 0 0 0 0\n2 0 0 0 0 0 0 0 0\n5 0 0 0 0 0 0 0 0\n", 4),
        ("# GHz S RI\n1 0 0 0 0 0 0 0 0\n", 2),
    ],
)
def test_errors_carry_line_numbers(text: str, line_number: int):
    with pytest.raises(TouchstoneError) as info:
        parse_touchstone(text)
    assert info.value.line_number == line_number
    assert str(info.value).startswith(f"line {line_number}:")


def test_round_trip_preserves_physics(tmp_path):
    path = str(tmp_path / "response.s2p")
    write_touchstone(RESPONSE, path)
    restored = read_touchstone(path)
    power = restored.s11.abs().pow(2) + restored.s21.abs().pow(2)
    assert (power - 1).abs().max().item() < 1e-10
    assert math.isclose(restored.frequencies[-1].item(), 16e9)
