"""
On-disk formats of the command-line tools and the run manifest.

* CSV tables with floats written at 17 significant digits.
* Binary grids: the magic ``MSGPGRD1``, a little-endian uint32 header length,
  a UTF-8 JSON header, then the values as little-endian float64 in flat
  index order (x index outermost).
* JSON reports with sorted keys; NaN is written as null.
"""

import csv
import hashlib
import json
import logging
import math
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Any, Dict, Iterable, List, Optional, Sequence, Tuple

import numpy as np
from django.conf import settings
from django.utils import timezone

from core.covariance_models import ScaleTag
from core.exceptions import ConfigError
from core.fields import FieldRealization, StructuredGrid
from core.gp import MultiscaleDataset
from utils.rng import RNG_ALGORITHM

logger = logging.getLogger(__name__)

GRID_MAGIC = b"MSGPGRD1"
DATASET_HEADER = ("scale", "x", "y", "value", "noise_sigma")


def format_value(value: Any) -> str:
    if isinstance(value, (bool, np.bool_)):
        return "1" if value else "0"
    if isinstance(value, (int, np.integer)):
        return str(int(value))
    if isinstance(value, (float, np.floating)):
        return format(float(value), ".17g")
    return str(value)


def write_csv(path: Path, header: Sequence[str], rows: Iterable[Sequence[Any]]) -> Path:
    path = Path(path)
    with open(path, "w", newline="", encoding="utf-8") as f:
        writer = csv.writer(f, lineterminator="\n")
        writer.writerow(header)
        for row in rows:
            writer.writerow([format_value(v) for v in row])
    return path


def read_csv(path: Path) -> Tuple[List[str], List[List[str]]]:
    path = Path(path)
    if not path.is_file():
        raise ConfigError(f"file not found: {path}")
    with open(path, newline="", encoding="utf-8") as f:
        reader = csv.reader(f)
        try:
            header = next(reader)
        except StopIteration:
            raise ConfigError(f"{path} is empty") from None
        return header, [row for row in reader if row]


def _sanitize(obj: Any) -> Any:
    if isinstance(obj, dict):
        return {str(k): _sanitize(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_sanitize(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return _sanitize(obj.tolist())
    if isinstance(obj, (np.bool_, bool)):
        return bool(obj)
    if isinstance(obj, np.integer):
        return int(obj)
    if isinstance(obj, (float, np.floating)):
        value = float(obj)
        return value if math.isfinite(value) else None
    return obj


def dumps_json(obj: Any) -> str:
    return json.dumps(_sanitize(obj), indent=2, sort_keys=True, allow_nan=False) + "\n"


def write_json(path: Path, obj: Any) -> Path:
    path = Path(path)
    path.write_text(dumps_json(obj), encoding="utf-8")
    return path


def read_json(path: Path) -> Any:
    path = Path(path)
    if not path.is_file():
        raise ConfigError(f"file not found: {path}")
    try:
        return json.loads(path.read_text(encoding="utf-8"))
    except json.JSONDecodeError as e:
        raise ConfigError(f"{path}: invalid JSON at line {e.lineno}, column {e.colno}: {e.msg}") from None


# ---------------------------------------------------------------------------
# Grids and fields
# ---------------------------------------------------------------------------


def write_grid(path: Path, grid: StructuredGrid, values: np.ndarray, meta: Optional[dict] = None) -> Path:
    values = np.asarray(values, dtype="<f8").ravel()
    if len(values) != grid.size:
        raise ConfigError(f"{len(values)} values for a grid of {grid.size} cells")
    header = dict(meta or {})
    header.update(grid.to_dict())
    header["dtype"] = "<f8"
    raw = dumps_json(header).encode("utf-8")
    path = Path(path)
    with open(path, "wb") as f:
        f.write(GRID_MAGIC)
        f.write(struct.pack("<I", len(raw)))
        f.write(raw)
        f.write(values.tobytes())
    return path


def read_grid(path: Path) -> Tuple[StructuredGrid, np.ndarray, dict]:
    path = Path(path)
    if not path.is_file():
        raise ConfigError(f"file not found: {path}")
    data = path.read_bytes()
    if data[: len(GRID_MAGIC)] != GRID_MAGIC:
        raise ConfigError(f"{path} is not a grid file")
    offset = len(GRID_MAGIC)
    (length,) = struct.unpack("<I", data[offset : offset + 4])
    offset += 4
    header = json.loads(data[offset : offset + length].decode("utf-8"))
    offset += length
    grid = StructuredGrid.from_dict(header)
    values = np.frombuffer(data[offset:], dtype="<f8").astype(float)
    if len(values) != grid.size:
        raise ConfigError(f"{path}: expected {grid.size} values, found {len(values)}")
    return grid, values, header


def write_field(path: Path, field_: FieldRealization, extra: Optional[dict] = None) -> Path:
    meta = {"scale": field_.scale.label, "seed": field_.seed, "index": field_.index}
    meta.update(extra or {})
    return write_grid(path, field_.grid, field_.values, meta)


def read_field(path: Path) -> FieldRealization:
    grid, values, header = read_grid(path)
    return FieldRealization(
        grid,
        values,
        ScaleTag.parse(header.get("scale", "fine")),
        seed=int(header.get("seed", 0)),
        index=int(header.get("index", 0)),
    )


def write_field_csv(path: Path, grid: StructuredGrid, columns: Dict[str, np.ndarray]) -> Path:
    """Cell centroids with one column per named value array."""
    centroids = grid.centroids
    names = list(columns)
    stacked = [np.asarray(columns[n], dtype=float).ravel() for n in names]
    rows = (
        [centroids[i, 0], centroids[i, 1]] + [col[i] for col in stacked] for i in range(grid.size)
    )
    return write_csv(path, ["x", "y"] + names, rows)


# ---------------------------------------------------------------------------
# Data sets
# ---------------------------------------------------------------------------


def write_dataset(path: Path, data: MultiscaleDataset) -> Path:
    rows = []
    for scale, X, y, noise in (
        (ScaleTag.COARSE, data.X_c, data.y_c, data.noise_c),
        (ScaleTag.FINE, data.X_f, data.y_f, data.noise_f),
    ):
        rows += [(scale.label, X[i, 0], X[i, 1], y[i], noise) for i in range(len(y))]
    return write_csv(path, DATASET_HEADER, rows)


def read_dataset(path: Path) -> MultiscaleDataset:
    header, rows = read_csv(path)
    if tuple(header) != DATASET_HEADER:
        raise ConfigError(f"{path}: expected columns {','.join(DATASET_HEADER)}")
    parts = {ScaleTag.FINE: ([], [], []), ScaleTag.COARSE: ([], [], [])}
    for line, row in enumerate(rows, start=2):
        try:
            scale = ScaleTag.parse(row[0])
            x, y, value, noise = (float(v) for v in row[1:5])
        except (ValueError, IndexError):
            raise ConfigError(f"{path}: malformed row at line {line}") from None
        X, Y, N = parts[scale]
        X.append((x, y))
        Y.append(value)
        N.append(noise)

    def noise_of(scale):
        values = parts[scale][2]
        return values[0] if values else 0.0

    return MultiscaleDataset(
        np.array(parts[ScaleTag.FINE][0]).reshape(-1, 2),
        np.array(parts[ScaleTag.FINE][1]),
        np.array(parts[ScaleTag.COARSE][0]).reshape(-1, 2),
        np.array(parts[ScaleTag.COARSE][1]),
        noise_f=noise_of(ScaleTag.FINE),
        noise_c=noise_of(ScaleTag.COARSE),
    )


# ---------------------------------------------------------------------------
# Run manifest
# ---------------------------------------------------------------------------


def config_hash(config: dict) -> str:
    canonical = json.dumps(_sanitize(config), sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(canonical.encode("utf-8")).hexdigest()


def file_hash(path: Path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


@dataclass
class RunManifest:
    command: str
    config: dict
    seeds: Dict[str, int] = field(default_factory=dict)
    stages: Dict[str, Any] = field(default_factory=dict)
    outputs: List[Dict[str, str]] = field(default_factory=list)
    timestamps: Dict[str, str] = field(default_factory=dict)
    version: str = ""
    rng: str = RNG_ALGORITHM

    def __post_init__(self):
        if not self.version:
            self.version = getattr(settings, "VERSION", "")
        self.timestamps.setdefault("started", timezone.localtime().isoformat())

    @property
    def config_hash(self) -> str:
        return config_hash(self.config)

    def add_output(self, path: Path, root: Path) -> None:
        self.outputs.append({"path": Path(path).relative_to(root).as_posix(), "sha256": file_hash(path)})

    def to_dict(self) -> dict:
        data = asdict(self)
        data["config_hash"] = self.config_hash
        return data


class OutputSet:
    """Files written by one command invocation.

    Leaving the context with an exception deletes every registered file
    except those marked ``keep``; on success the manifest is written last.
    """

    def __init__(self, out_dir: Path, manifest: RunManifest):
        self.out_dir = Path(out_dir)
        self.manifest = manifest
        self.paths: List[Path] = []
        self.kept: List[Path] = []

    def __enter__(self) -> "OutputSet":
        self.out_dir.mkdir(parents=True, exist_ok=True)
        return self

    def path(self, name: str, keep: bool = False) -> Path:
        target = self.out_dir / name
        target.parent.mkdir(parents=True, exist_ok=True)
        (self.kept if keep else self.paths).append(target)
        return target

    def __exit__(self, exc_type, exc, tb):
        if exc_type is not None:
            for target in self.paths:
                if target.exists():
                    target.unlink()
                    logger.info(f"Removed partial output {target}")
            return False
        for target in self.paths + self.kept:
            if target.exists():
                self.manifest.add_output(target, self.out_dir)
        self.manifest.timestamps["finished"] = timezone.localtime().isoformat()
        write_json(self.out_dir / "manifest.json", self.manifest.to_dict())
        logger.info(f"Wrote {len(self.manifest.outputs)} outputs and manifest to {self.out_dir}")
        return False
