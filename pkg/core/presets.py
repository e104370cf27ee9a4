"""
Experiment configuration: a versioned JSON schema parsed into dataclasses,
plus the built-in presets for the model-selection tests and the Darcy
propagation experiment.
"""

import copy
import json
import logging
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Any, Dict, List, Optional, Tuple

from core.exceptions import ConfigError

logger = logging.getLogger(__name__)

SCHEMA_VERSION = 1


@dataclass(frozen=True)
class GridConfig:
    extent: Tuple[float, float]
    shape: Tuple[int, int]
    origin: Tuple[float, float] = (0.0, 0.0)


@dataclass(frozen=True)
class FineFieldConfig:
    sigma: float
    lam: float
    nu: float


@dataclass(frozen=True)
class ObservationConfig:
    n_fine: int
    n_coarse: int
    noise_sigma: float
    window_cells: int


@dataclass(frozen=True)
class NystromConfig:
    shape: Tuple[int, int]


@dataclass(frozen=True)
class FitConfig:
    criterion: str = "ml"
    model: str = "bimatern"
    n_starts: int = 5
    max_evals: int = 4000
    max_iter: int = 200
    tol: float = 1e-5
    fd_step: float = 1e-5
    fit_eta: bool = False
    quadrature_order: int = 16


@dataclass(frozen=True)
class DarcyConfig:
    K_G: float = 1.0
    h_L: float = 1.0
    h_R: float = 0.0
    n_head_obs: int = 20
    head_noise_rel: float = 5e-2
    n_real: int = 1000
    solver: str = "direct"
    profile_x2: Optional[float] = None

    @property
    def sigma_eh(self) -> float:
        return self.head_noise_rel * abs(self.h_L - self.h_R)


@dataclass(frozen=True)
class ExperimentConfig:
    name: str
    seed: int
    grid: GridConfig
    fine: FineFieldConfig
    observations: ObservationConfig
    nystrom: NystromConfig
    replicates: int = 1
    fit: FitConfig = field(default_factory=FitConfig)
    darcy: Optional[DarcyConfig] = None
    schema_version: int = SCHEMA_VERSION

    @property
    def eta_c(self) -> float:
        return self.observations.window_cells * self.grid.extent[0] / self.grid.shape[0]

    def to_dict(self) -> Dict[str, Any]:
        return asdict(self)

    def replace_seed(self, seed: int) -> "ExperimentConfig":
        data = self.to_dict()
        data["seed"] = int(seed)
        return parse_config(data)


_TEST1 = {
    "schema_version": SCHEMA_VERSION,
    "name": "test1",
    "seed": 20180403,
    "grid": {"extent": [2.0, 1.0], "shape": [256, 128], "origin": [0.0, 0.0]},
    "fine": {"sigma": 1.0, "lam": 0.05, "nu": 0.5},
    "observations": {"n_fine": 50, "n_coarse": 150, "noise_sigma": 5e-2, "window_cells": 8},
    "nystrom": {"shape": [128, 64]},
    "replicates": 1,
}

PRESETS: Dict[str, Dict[str, Any]] = {
    "test1": _TEST1,
    "test2": {
        **_TEST1,
        "name": "test2",
        "fine": {"sigma": 1.0, "lam": 0.10, "nu": 0.5},
        "observations": {"n_fine": 40, "n_coarse": 120, "noise_sigma": 5e-2, "window_cells": 16},
    },
    "test3": {
        **_TEST1,
        "name": "test3",
        "grid": {"extent": [1.0, 1.0], "shape": [64, 64], "origin": [0.0, 0.0]},
        "observations": {"n_fine": 150, "n_coarse": 50, "noise_sigma": 5e-2, "window_cells": 8},
        "nystrom": {"shape": [64, 64]},
        "replicates": 500,
    },
    "darcy1": {
        **_TEST1,
        "name": "darcy1",
        "darcy": {
            "K_G": 1.0,
            "h_L": 1.0,
            "h_R": 0.0,
            "n_head_obs": 20,
            "head_noise_rel": 5e-2,
            "n_real": 1000,
            "solver": "direct",
            "profile_x2": None,
        },
    },
}


def _path(prefix: str, key: str) -> str:
    return f"{prefix}.{key}" if prefix else key


def _section(data: Dict[str, Any], key: str, cls, prefix: str = "", required: bool = True):
    path = _path(prefix, key)
    if key not in data or data[key] is None:
        if required:
            raise ConfigError(f"missing config section '{path}'")
        return None
    raw = data[key]
    if not isinstance(raw, dict):
        raise ConfigError(f"config section '{path}' must be an object")
    names = {f.name: f for f in cls.__dataclass_fields__.values()}
    unknown = sorted(set(raw) - set(names))
    if unknown:
        raise ConfigError(f"unknown key '{_path(path, unknown[0])}'")
    values = {}
    for name, f in names.items():
        if name not in raw:
            continue
        values[name] = _coerce(raw[name], f.type, _path(path, name))
    try:
        return cls(**values)
    except TypeError as e:
        raise ConfigError(f"config section '{path}' is incomplete: {e}") from None


def _coerce(value, annotation, path: str):
    text = str(annotation)
    try:
        if "Tuple[int, int]" in text:
            if len(value) != 2:
                raise ValueError
            return tuple(int(v) for v in value)
        if "Tuple[float, float]" in text:
            if len(value) != 2:
                raise ValueError
            return tuple(float(v) for v in value)
        if annotation in (int, "int"):
            if isinstance(value, bool) or float(value) != int(value):
                raise ValueError
            return int(value)
        if annotation in (float, "float"):
            if isinstance(value, bool):
                raise ValueError
            return float(value)
        if annotation in (bool, "bool"):
            if not isinstance(value, bool):
                raise ValueError
            return value
        if "Optional[float]" in text:
            return None if value is None else float(value)
        if annotation in (str, "str"):
            if not isinstance(value, str):
                raise ValueError
            return value
    except (TypeError, ValueError):
        raise ConfigError(f"invalid value for '{path}': {value!r}") from None
    return value


def _validate(config: ExperimentConfig) -> None:
    grid, obs = config.grid, config.observations
    checks: List[Tuple[bool, str]] = [
        (min(grid.shape) >= 1, "grid.shape must be positive"),
        (min(grid.extent) > 0.0, "grid.extent must be positive"),
        (
            abs(grid.extent[0] / grid.shape[0] - grid.extent[1] / grid.shape[1]) <= 1e-9 * grid.extent[0] / grid.shape[0],
            "grid cells must be square",
        ),
        (config.fine.sigma > 0.0, "fine.sigma must be positive"),
        (config.fine.lam > 0.0, "fine.lam must be positive"),
        (config.fine.nu > 0.0, "fine.nu must be positive"),
        (obs.n_fine >= 1, "observations.n_fine must be positive"),
        (obs.n_coarse >= 0, "observations.n_coarse must be nonnegative"),
        (obs.noise_sigma >= 0.0, "observations.noise_sigma must be nonnegative"),
        (1 <= obs.window_cells <= min(grid.shape), "observations.window_cells must fit the grid"),
        (min(config.nystrom.shape) >= 1, "nystrom.shape must be positive"),
        (config.replicates >= 1, "replicates must be positive"),
        (config.fit.criterion in ("ml", "loo"), "fit.criterion must be ml or loo"),
        (config.fit.model in ("bimatern", "blockavg"), "fit.model must be bimatern or blockavg"),
        (config.fit.n_starts >= 1, "fit.n_starts must be positive"),
        (config.fit.quadrature_order >= 2, "fit.quadrature_order must be at least 2"),
    ]
    if config.darcy is not None:
        checks += [
            (config.darcy.K_G > 0.0, "darcy.K_G must be positive"),
            (config.darcy.h_L != config.darcy.h_R, "darcy.h_L and darcy.h_R must differ"),
            (config.darcy.n_real >= 2, "darcy.n_real must be at least 2"),
            (config.darcy.n_head_obs >= 0, "darcy.n_head_obs must be nonnegative"),
            (config.darcy.head_noise_rel > 0.0, "darcy.head_noise_rel must be positive"),
            (config.darcy.solver in ("direct", "cg"), "darcy.solver must be direct or cg"),
        ]
    for ok, message in checks:
        if not ok:
            raise ConfigError(message)


def parse_config(data: Dict[str, Any]) -> ExperimentConfig:
    """Build an ``ExperimentConfig`` from a decoded JSON document."""
    if not isinstance(data, dict):
        raise ConfigError("config must be a JSON object")
    version = data.get("schema_version")
    if version != SCHEMA_VERSION:
        raise ConfigError(f"unsupported schema_version {version!r} (expected {SCHEMA_VERSION})")
    known = {f for f in ExperimentConfig.__dataclass_fields__}
    unknown = sorted(set(data) - known)
    if unknown:
        raise ConfigError(f"unknown key '{unknown[0]}'")
    for key in ("name", "seed"):
        if key not in data:
            raise ConfigError(f"missing config key '{key}'")
    config = ExperimentConfig(
        name=_coerce(data["name"], str, "name"),
        seed=_coerce(data["seed"], int, "seed"),
        grid=_section(data, "grid", GridConfig),
        fine=_section(data, "fine", FineFieldConfig),
        observations=_section(data, "observations", ObservationConfig),
        nystrom=_section(data, "nystrom", NystromConfig),
        replicates=_coerce(data.get("replicates", 1), int, "replicates"),
        fit=_section(data, "fit", FitConfig, required=False) or FitConfig(),
        darcy=_section(data, "darcy", DarcyConfig, required=False),
    )
    _validate(config)
    return config


def preset(name: str) -> ExperimentConfig:
    if name not in PRESETS:
        raise ConfigError(f"unknown preset '{name}' (available: {', '.join(sorted(PRESETS))})")
    return parse_config(copy.deepcopy(PRESETS[name]))


def loads_config(text: str) -> ExperimentConfig:
    try:
        data = json.loads(text)
    except json.JSONDecodeError as e:
        raise ConfigError(f"invalid JSON at line {e.lineno}, column {e.colno}: {e.msg}") from None
    return parse_config(data)


def load_config(source: str) -> ExperimentConfig:
    """A preset name or the path of a JSON config file."""
    if source in PRESETS:
        return preset(source)
    path = Path(source)
    if not path.is_file():
        raise ConfigError(f"config '{source}' is neither a preset nor a readable file")
    logger.debug(f"Reading config from {path}")
    return loads_config(path.read_text(encoding="utf-8"))
