"""Run configuration for the command-line pipeline.

Values resolve as command-line flag > JSON config file > built-in default.  The
file mirrors 'RunConfig.to_dict()', so any subset of it is a valid config file,
and every unknown key is rejected before work starts.
"""
import json
from dataclasses import asdict, dataclass, field, fields, replace
from typing import Any, Dict, Optional, Type, TypeVar

from model_based_fss.circuit import FrequencyGrid, Topology
from model_based_fss.data import GEOMETRY_FIELDS, SweepSpec
from model_based_fss.evalkit import CompareConfig
from model_based_fss.training import DirectConfig, TrainingConfig

T = TypeVar("T")


class ConfigError(ValueError):
    pass


@dataclass
class PathsConfig:
    dataset: str = "dataset.json"
    checkpoint: str = "checkpoint.json"
    out_dir: str = "results"


@dataclass
class RunConfig:
    seed: int = 0
    progress: bool = False
    sweep: SweepSpec = field(default_factory=SweepSpec)
    topology: Topology = field(default_factory=Topology.default)
    training: TrainingConfig = field(default_factory=TrainingConfig)
    direct: DirectConfig = field(default_factory=DirectConfig)
    compare: CompareConfig = field(default_factory=CompareConfig)
    paths: PathsConfig = field(default_factory=PathsConfig)

    def __post_init__(self) -> None:
        # The run seed and progress flag are shared by every stage.
        self.training = replace(self.training, seed=self.seed, progress=self.progress)
        self.direct = replace(self.direct, seed=self.seed, progress=self.progress)
        self.compare = replace(self.compare, seed=self.seed)

    def to_dict(self) -> Dict[str, Any]:
        data = {
            "seed": self.seed,
            "progress": self.progress,
            "sweep": self.sweep.to_dict(),
            "topology": self.topology.to_dict(),
            "training": asdict(self.training),
            "direct": asdict(self.direct),
            "compare": asdict(self.compare),
            "paths": asdict(self.paths),
        }
        for name in ("training", "direct"):
            del data[name]["seed"], data[name]["progress"]
        del data["compare"]["seed"]
        # Round trip through JSON so tuples read back as lists.
        return json.loads(json.dumps(data))

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> "RunConfig":
        _check_keys(cls, data, "")
        merged = _merge(RunConfig().to_dict(), data, "")
        _check_keys(Topology, merged["topology"], "topology")
        try:
            return cls(
                seed=int(merged["seed"]),
                progress=bool(merged["progress"]),
                sweep=_build_sweep(merged["sweep"]),
                topology=Topology.from_dict(merged["topology"]),
                training=_build(TrainingConfig, merged["training"], "training"),
                direct=_build(DirectConfig, merged["direct"], "direct"),
                compare=_build(CompareConfig, merged["compare"], "compare"),
                paths=_build(PathsConfig, merged["paths"], "paths"),
            )
        except ConfigError:
            raise
        except (KeyError, TypeError, ValueError) as e:
            raise ConfigError(f"Invalid config: {e}") from e


def _check_keys(cls: Type[Any], data: Any, where: str) -> None:
    if not isinstance(data, dict):
        raise ConfigError(f"{where or 'config'}: expected a JSON object")
    unknown = sorted(set(data) - {f.name for f in fields(cls)})
    if unknown:
        raise ConfigError(f"Unknown config keys in {where or 'config'}: {unknown}")


def _merge(base: Dict[str, Any], update: Dict[str, Any], where: str) -> Dict[str, Any]:
    merged = dict(base)
    for key, value in update.items():
        if key not in base:
            raise ConfigError(f"Unknown config key '{where}{key}'")
        if isinstance(base[key], dict) and key != "topology":
            if not isinstance(value, dict):
                raise ConfigError(f"'{where}{key}' must be a JSON object")
            merged[key] = _merge(base[key], value, f"{where}{key}.")
        else:
            merged[key] = value
    return merged


def _build(cls: Type[T], data: Dict[str, Any], where: str) -> T:
    _check_keys(cls, data, where)
    try:
        return cls(**data)
    except (TypeError, ValueError) as e:
        raise ConfigError(f"{where}: {e}") from e


def _build_sweep(data: Dict[str, Any]) -> SweepSpec:
    try:
        for name in GEOMETRY_FIELDS:
            if len(data[name]) != 3:
                raise ConfigError(f"sweep.{name} must be [min, max, n_levels]")
        grid = _build(FrequencyGrid, data["grid"], "sweep.grid")
        return SweepSpec.from_dict({**data, "grid": grid.to_dict()})
    except ConfigError:
        raise
    except (KeyError, TypeError, ValueError) as e:
        raise ConfigError(f"sweep: {e}") from e


def load_run_config(
    path: Optional[str] = None, overrides: Optional[Dict[str, Any]] = None
) -> RunConfig:
    """Defaults, then the JSON file at 'path', then 'overrides' (nested like the
    file) on top.
    """
    data: Dict[str, Any] = {}
    if path is not None:
        try:
            with open(path) as f:
                data = json.load(f)
        except FileNotFoundError:
            raise ConfigError(f"Config file not found: {path}")
        except json.JSONDecodeError as e:
            raise ConfigError(f"Config file {path} is not valid JSON: {e}")
        if not isinstance(data, dict):
            raise ConfigError(f"Config file {path} must hold a JSON object")
    data = _merge(RunConfig().to_dict(), data, "")
    data = _merge(data, overrides or {}, "")
    return RunConfig.from_dict(data)
