from dataclasses import dataclass
from math import pi, sqrt
from typing import Any, Dict, Literal, NamedTuple, Optional, Sequence, Tuple, Union

import torch
from einops import einsum
from torch import Tensor

SPEED_OF_LIGHT = 299_792_458.0
# Wave impedance of free space for normal incidence.
Z0_FREE = 376.730313668
DTYPE = torch.float64
COMPLEX_DTYPE = torch.complex128

ResonatorKind = Literal["parallel-lc", "series-lc"]
RESONATOR_KINDS: Tuple[str, ...] = ("parallel-lc", "series-lc")
Number = Union[float, Tensor]


class DomainError(ValueError):
    """Raised for physically meaningless inputs (non-positive L, C, f, ...)."""


class PoleError(ZeroDivisionError):
    """Raised when a series-LC admittance is evaluated exactly at resonance."""


class SingularNetworkError(ArithmeticError):
    """Raised when an ABCD matrix has no S-parameter representation."""


@dataclass(frozen=True)
class FrequencyGrid:
    f_start: float = 6e9
    f_stop: float = 16e9
    n_points: int = 201

    def __post_init__(self) -> None:
        if self.n_points < 2:
            raise DomainError(f"n_points must be >= 2, got {self.n_points}")
        if not 0 < self.f_start < self.f_stop:
            raise DomainError(
                f"Expected 0 < f_start < f_stop, got {self.f_start=}, {self.f_stop=}"
            )

    def points(self) -> Tensor:
        j = torch.arange(self.n_points, dtype=DTYPE)
        step = (self.f_stop - self.f_start) / (self.n_points - 1)
        return self.f_start + j * step

    def to_dict(self) -> Dict[str, Any]:
        return {
            "f_start": self.f_start,
            "f_stop": self.f_stop,
            "n_points": self.n_points,
        }

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> "FrequencyGrid":
        return cls(
            f_start=float(data["f_start"]),
            f_stop=float(data["f_stop"]),
            n_points=int(data["n_points"]),
        )


@dataclass(frozen=True)
class Screen:
    kind: ResonatorKind = "parallel-lc"

    def __post_init__(self) -> None:
        if self.kind not in RESONATOR_KINDS:
            raise DomainError(
                f"Unsupported resonator kind '{self.kind}'. "
                f"Supported: {', '.join(RESONATOR_KINDS)}"
            )


@dataclass(frozen=True)
class Spacer:
    length: float  # meters
    eps_r: float = 1.0

    def __post_init__(self) -> None:
        if not self.length > 0:
            raise DomainError(f"Spacer length must be > 0, got {self.length}")
        if not self.eps_r >= 1:
            raise DomainError(f"Spacer eps_r must be >= 1, got {self.eps_r}")


@dataclass(frozen=True)
class Topology:
    """Alternating cascade [screen_1, spacer_1, screen_2, ..., screen_n], read from
    port 1 to port 2.  Each screen is a shunt resonator carrying two circuit
    parameters (L, C), so the flattened circuit vector has 2 * n_screens entries
    ordered [L_1, C_1, L_2, C_2, ...].
    """

    screens: Tuple[Screen, ...] = (Screen(), Screen())
    spacers: Tuple[Spacer, ...] = (Spacer(length=9.5e-3),)
    port_eps_r: float = 1.0

    def __post_init__(self) -> None:
        if len(self.screens) == 0:
            raise DomainError("Topology needs at least one screen")
        if len(self.spacers) != len(self.screens) - 1:
            raise DomainError(
                f"Expected {len(self.screens) - 1} spacers for {len(self.screens)} "
                f"screens, got {len(self.spacers)}"
            )
        if not self.port_eps_r >= 1:
            raise DomainError(f"port_eps_r must be >= 1, got {self.port_eps_r}")

    @property
    def num_circuit_params(self) -> int:
        return 2 * len(self.screens)

    @property
    def is_palindrome(self) -> bool:
        return (
            self.screens == self.screens[::-1] and self.spacers == self.spacers[::-1]
        )

    @classmethod
    def default(cls) -> "Topology":
        return cls()

    @classmethod
    def single(cls, kind: ResonatorKind = "parallel-lc") -> "Topology":
        return cls(screens=(Screen(kind),), spacers=())

    def with_spacer_lengths(self, lengths: Sequence[float]) -> "Topology":
        if len(lengths) != len(self.spacers):
            raise ValueError(
                f"Expected {len(self.spacers)} spacer lengths, got {len(lengths)}"
            )
        spacers = tuple(
            Spacer(length=float(length), eps_r=spacer.eps_r)
            for spacer, length in zip(self.spacers, lengths)
        )
        return Topology(self.screens, spacers, self.port_eps_r)

    def to_dict(self) -> Dict[str, Any]:
        return {
            "screens": [{"kind": s.kind} for s in self.screens],
            "spacers": [{"length": s.length, "eps_r": s.eps_r} for s in self.spacers],
            "port_eps_r": self.port_eps_r,
        }

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> "Topology":
        return cls(
            screens=tuple(Screen(kind=s["kind"]) for s in data["screens"]),
            spacers=tuple(
                Spacer(length=float(s["length"]), eps_r=float(s["eps_r"]))
                for s in data["spacers"]
            ),
            port_eps_r=float(data.get("port_eps_r", 1.0)),
        )


class SResponse(NamedTuple):
    """S-parameters over a frequency grid.  's' has shape (..., n_points, 2, 2) and
    holds [[s11, s12], [s21, s22]] per frequency; leading dimensions index samples.
    """

    grid: FrequencyGrid
    s: Tensor

    @property
    def s11(self) -> Tensor:
        return self.s[..., 0, 0]

    @property
    def s12(self) -> Tensor:
        return self.s[..., 0, 1]

    @property
    def s21(self) -> Tensor:
        return self.s[..., 1, 0]

    @property
    def s22(self) -> Tensor:
        return self.s[..., 1, 1]

    @property
    def frequencies(self) -> Tensor:
        return self.grid.points()

    def select(self, index: Union[int, slice, Tensor]) -> "SResponse":
        """Select samples along the leading (batch) dimension."""
        return SResponse(self.grid, self.s[index])


def _as_real(value: Number) -> Tensor:
    return torch.as_tensor(value, dtype=DTYPE)


def _as_complex(value: Union[complex, Tensor]) -> Tensor:
    return torch.as_tensor(value, dtype=COMPLEX_DTYPE)


def _imag(x: Tensor) -> Tensor:
    """Purely imaginary complex tensor j*x from a real tensor x."""
    return torch.complex(torch.zeros_like(x), x)


def _check_positive(name: str, value: Tensor) -> None:
    if not bool(torch.all(value > 0)):
        raise DomainError(f"{name} must be > 0, got {value}")


def resonance_frequency(inductance: Number, capacitance: Number) -> Tensor:
    L, C = _as_real(inductance), _as_real(capacitance)
    _check_positive("L", L)
    _check_positive("C", C)
    return 1 / (2 * pi * torch.sqrt(L * C))


def admittance(
    kind: ResonatorKind, inductance: Number, capacitance: Number, frequency: Number
) -> Tensor:
    """Admittance (S) of a lossless LC resonator.  Broadcasts over tensor inputs."""
    L, C, f = _as_real(inductance), _as_real(capacitance), _as_real(frequency)
    _check_positive("L", L)
    _check_positive("C", C)
    _check_positive("f", f)
    omega = 2 * pi * f

    if kind == "parallel-lc":
        return _imag(omega * C - 1 / (omega * L))
    elif kind == "series-lc":
        reactance = omega * L - 1 / (omega * C)
        if bool(torch.any(reactance == 0)):
            raise PoleError("series-LC admittance evaluated exactly at resonance")
        # 1 / (jX) = -j / X
        return _imag(-1 / reactance)
    else:
        raise DomainError(
            f"Unsupported resonator kind '{kind}'. "
            f"Supported: {', '.join(RESONATOR_KINDS)}"
        )


def _matrix(a: Tensor, b: Tensor, c: Tensor, d: Tensor) -> Tensor:
    a, b, c, d = torch.broadcast_tensors(a, b, c, d)
    top = torch.stack((a, b), dim=-1)
    bottom = torch.stack((c, d), dim=-1)
    return torch.stack((top, bottom), dim=-2)


def determinant(m: Tensor) -> Tensor:
    return m[..., 0, 0] * m[..., 1, 1] - m[..., 0, 1] * m[..., 1, 0]


def abcd_shunt(y: Union[complex, Tensor]) -> Tensor:
    y = _as_complex(y)
    if not bool(torch.all(torch.isfinite(y))):
        raise DomainError(f"Shunt admittance must be finite, got {y}")
    one, zero = torch.ones_like(y), torch.zeros_like(y)
    return _matrix(one, zero, y, one)


def _line_matrix(
    length: Tensor, eps_r: float, frequency: Tensor, z0_free: float
) -> Tensor:
    electrical_length = 2 * pi * frequency * sqrt(eps_r) / SPEED_OF_LIGHT * length
    impedance = z0_free / sqrt(eps_r)
    cos = torch.cos(electrical_length)
    sin = torch.sin(electrical_length)
    cos_c = torch.complex(cos, torch.zeros_like(cos))
    return _matrix(cos_c, _imag(impedance * sin), _imag(sin / impedance), cos_c)


def abcd_line(
    length: Number, eps_r: float, frequency: Number, z0_free: float = Z0_FREE
) -> Tensor:
    """Transmission-line section of a dielectric spacer (normal incidence)."""
    length_t, f = _as_real(length), _as_real(frequency)
    if not bool(torch.all(length_t >= 0)):
        raise DomainError(f"Line length must be >= 0, got {length_t}")
    if not eps_r >= 1:
        raise DomainError(f"eps_r must be >= 1, got {eps_r}")
    _check_positive("f", f)
    _check_positive("z0_free", _as_real(z0_free))
    return _line_matrix(length_t, eps_r, f, z0_free)


def cascade(ms: Sequence[Tensor]) -> Tensor:
    """Product of ABCD matrices in port-1-first order.  Broadcasts leading dims."""
    if len(ms) == 0:
        raise ValueError("cascade() needs at least one ABCD matrix")

    total = ms[0]
    for m in ms[1:]:
        total, m = torch.broadcast_tensors(total, m)
        total = einsum(total, m, "... i k, ... k j -> ... i j")
    return total


def _s_from_abcd(m: Tensor, z0: float, scale: Tensor, det: Tensor) -> Tensor:
    # NOTE: 'm' may be scaled by 'scale' (see '_cascade_response').  s11 and s22
    # are invariant to the scale, s21 picks it up linearly.  'det' is the
    # determinant of the *unscaled* network.
    a, b, c, d = m[..., 0, 0], m[..., 0, 1], m[..., 1, 0], m[..., 1, 1]
    delta = a + b / z0 + c * z0 + d
    s11 = (a + b / z0 - c * z0 - d) / delta
    s22 = (-a + b / z0 - c * z0 + d) / delta
    s21 = 2 * scale / delta
    s12 = 2 * scale * det / delta
    return _matrix(s11, s12, s21, s22)


def abcd_to_s(m: Tensor, z0: float = Z0_FREE) -> Tensor:
    """Convert ABCD matrices (..., 2, 2) to S matrices (..., 2, 2) for a real
    reference impedance z0.
    """
    if not z0 > 0:
        raise DomainError(f"Reference impedance must be > 0, got {z0}")
    m = _as_complex(m)
    a, b, c, d = m[..., 0, 0], m[..., 0, 1], m[..., 1, 0], m[..., 1, 1]
    delta = a + b / z0 + c * z0 + d
    if bool(torch.any(delta == 0)):
        raise SingularNetworkError("ABCD matrix has a + b/z0 + c*z0 + d = 0")
    return _s_from_abcd(m, z0, torch.ones_like(delta), determinant(m))


def port_impedance(topology: Topology, z0_free: float = Z0_FREE) -> float:
    return z0_free / sqrt(topology.port_eps_r)


def _cascade_response(
    params: Tensor,
    topology: Topology,
    frequencies: Tensor,
    z0_free: float,
    spacer_lengths: Optional[Tensor] = None,
) -> Tensor:
    """Unchecked core of 'f_phys'.  Shapes: params (..., N_c), frequencies (n,),
    spacer_lengths (..., n_spacers) or None -> S matrices (..., n, 2, 2).

    Contains no data-dependent control flow, so it can be traced by
    'torch.func.jacfwd' and 'torch.func.vmap'.
    """
    omega = 2 * pi * frequencies
    elements = []
    # Series-LC screens are carried in impedance-scaled form [[z, 0], [1, z]],
    # i.e. z times the shunt ABCD.  The product of scales is folded back into
    # s21/s12, which maps the admittance pole (z = 0) to s21 = 0 exactly.
    scale = torch.ones_like(omega * params[..., :1], dtype=COMPLEX_DTYPE)
    det = torch.ones_like(scale)
    for k, screen in enumerate(topology.screens):
        inductance = params[..., 2 * k, None]
        capacitance = params[..., 2 * k + 1, None]
        if screen.kind == "parallel-lc":
            y = _imag(omega * capacitance - 1 / (omega * inductance))
            one, zero = torch.ones_like(y), torch.zeros_like(y)
            m = _matrix(one, zero, y, one)
            det = det * determinant(m)
        else:
            z = _imag(omega * inductance - 1 / (omega * capacitance))
            one, zero = torch.ones_like(z), torch.zeros_like(z)
            m = _matrix(z, zero, one, z)
            scale = scale * z
        elements.append(m)

        if k < len(topology.spacers):
            spacer = topology.spacers[k]
            length: Tensor
            if spacer_lengths is None:
                length = torch.tensor(spacer.length, dtype=DTYPE)
            else:
                length = spacer_lengths[..., k, None]
            line = _line_matrix(length, spacer.eps_r, frequencies, z0_free)
            det = det * determinant(line)
            elements.append(line)

    total = cascade(elements)
    scale, det = torch.broadcast_tensors(scale, det)
    return _s_from_abcd(total, port_impedance(topology, z0_free), scale, det)


def check_circuit_params(params: Tensor, topology: Topology) -> Tensor:
    params = _as_real(params)
    if params.dim() == 0 or params.shape[-1] != topology.num_circuit_params:
        raise ValueError(
            f"Expected circuit params with last dimension "
            f"{topology.num_circuit_params}, got shape {tuple(params.shape)}"
        )
    if not bool(torch.all(params > 0)):
        raise DomainError("All circuit parameters must be > 0")
    if not bool(torch.all(torch.isfinite(params))):
        raise DomainError("All circuit parameters must be finite")
    return params


def check_spacer_lengths(
    spacer_lengths: Optional[Tensor], topology: Topology
) -> Optional[Tensor]:
    if spacer_lengths is None:
        return None
    spacer_lengths = _as_real(spacer_lengths)
    if spacer_lengths.dim() == 0 or spacer_lengths.shape[-1] != len(topology.spacers):
        raise ValueError(
            f"Expected spacer lengths with last dimension {len(topology.spacers)}, "
            f"got shape {tuple(spacer_lengths.shape)}"
        )
    if not bool(torch.all(spacer_lengths > 0)):
        raise DomainError("All spacer lengths must be > 0")
    return spacer_lengths


def f_phys(
    params: Tensor,
    topology: Topology,
    grid: Optional[FrequencyGrid] = None,
    z0_free: float = Z0_FREE,
    spacer_lengths: Optional[Tensor] = None,
) -> SResponse:
    """Circuit parameters -> S-parameters over 'grid'.

    'params' has shape (..., N_c).  'spacer_lengths' optionally overrides the
    topology's spacer lengths per sample, with shape (..., n_spacers).
    """
    grid = grid or FrequencyGrid()
    params = check_circuit_params(params, topology)
    spacer_lengths = check_spacer_lengths(spacer_lengths, topology)
    s = _cascade_response(params, topology, grid.points(), z0_free, spacer_lengths)
    return SResponse(grid, s)


def response_components(s: Tensor) -> Tensor:
    """Real view of S matrices (..., n, 2, 2) -> (..., n, 4) ordered
    [Re s11, Im s11, Re s21, Im s21].
    """
    s11 = torch.view_as_real(s[..., 0, 0])
    s21 = torch.view_as_real(s[..., 1, 0])
    return torch.cat((s11, s21), dim=-1)
