"""Pipeline configuration: presets, TOML loading and provenance.

Precedence, lowest to highest: preset, TOML file, explicit overrides.
The ``paper`` preset holds the published training recipe; ``desk`` scales it
to a single CPU (smaller batches and network, more epochs, 128^3 extraction).
"""

from __future__ import annotations

import copy
import hashlib
import json
import subprocess
from dataclasses import asdict, dataclass, field, fields, is_dataclass
from pathlib import Path

import tomli

from . import __version__
from .errors import InvalidArgument, IoError
from .extract import ExtractionConfig
from .train import LossWeights, TrainConfig

SCHEMA_VERSION = 1
PRESETS = ("paper", "desk")


@dataclass
class ScanConfig:
    layout: str = "grid"          # "grid" (room-style) or "orbit" (object-style)
    spacing: float = 1.5
    tilt: float = 30.0
    height: float = 1.5
    width: int = 320
    image_height: int = 240
    vfov: float = 60.0
    points: int = 100_000
    orbit_count: int = 20
    orbit_distance: float = 4.0   # in bounding-sphere radii
    min_elevation: float = -90.0
    max_elevation: float = 90.0
    noise_std: float = 0.0
    max_depth_jump: float | None = None

    def __post_init__(self):
        if self.layout not in ("grid", "orbit"):
            raise InvalidArgument(f"unknown camera layout {self.layout!r}")


@dataclass
class PrepConfig:
    k: int = 20
    near_radius: float = 0.05
    cluster_angle: float = 60.0   # degrees
    per_ray: int = 6
    near_count: int = 2
    near_band: float = 0.02
    empty_res: float = 0.001
    max_empty: int = 4_000_000
    padding: float = 0.0
    estimate_normals: bool = False


@dataclass
class EvalConfig:
    samples: int = 262_144
    resolution: int = 128


@dataclass
class PipelineConfig:
    preset: str = "paper"
    seed: int = 0
    threads: int | None = None
    scan: ScanConfig = field(default_factory=ScanConfig)
    prep: PrepConfig = field(default_factory=PrepConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    extract: ExtractionConfig = field(default_factory=lambda: ExtractionConfig(resolution=640))
    eval: EvalConfig = field(default_factory=EvalConfig)

    def to_dict(self) -> dict:
        return asdict(self)

    def config_hash(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(blob.encode()).hexdigest()

    def replace(self, overrides: dict) -> "PipelineConfig":
        """Copy with dotted-key overrides applied, e.g. ``{"train.lr": 1e-3}``."""
        out = copy.deepcopy(self)
        for key, value in overrides.items():
            _set_path(out, key.split("."), value)
        _revalidate(out)
        return out


def _set_path(obj, path, value):
    for name in path[:-1]:
        if not hasattr(obj, name):
            raise InvalidArgument(f"unknown config section {name!r}")
        obj = getattr(obj, name)
    name = path[-1]
    if not is_dataclass(obj) or name not in {f.name for f in fields(obj)}:
        raise InvalidArgument(f"unknown config key {'.'.join(path)!r}")
    if isinstance(value, dict):
        for k, v in value.items():
            _set_path(getattr(obj, name), [k], v)
    else:
        setattr(obj, name, value)


def _revalidate(cfg: PipelineConfig):
    # rerun field checks after in-place edits
    for part in (cfg.scan, cfg.train, cfg.extract):
        part.__post_init__()
    cfg.train.weights.__post_init__()
    if cfg.preset not in PRESETS:
        raise InvalidArgument(f"unknown preset {cfg.preset!r}; expected one of {PRESETS}")


def preset(name: str) -> PipelineConfig:
    if name == "paper":
        return PipelineConfig(
            preset="paper",
            train=TrainConfig(mode="indicator", epochs=40, batch_size=100_000, lr=1e-4,
                              weights=LossWeights(grad=1.0, surface=100.0, empty=100.0),
                              hidden=256, layers=5, omega0=30.0),
            extract=ExtractionConfig(resolution=640),
        )
    if name == "desk":
        return PipelineConfig(
            preset="desk",
            scan=ScanConfig(layout="orbit", points=50_000, orbit_count=20),
            prep=PrepConfig(max_empty=50_000, padding=0.1),
            train=TrainConfig(mode="indicator", epochs=150, batch_size=10_000, lr=1e-4,
                              weights=LossWeights(grad=1.0, surface=100.0, empty=100.0),
                              hidden=128, layers=5, omega0=30.0, jitter=False),
            extract=ExtractionConfig(resolution=128),
        )
    raise InvalidArgument(f"unknown preset {name!r}; expected one of {PRESETS}")


def load_toml(path) -> dict:
    try:
        with open(path, "rb") as fh:
            return tomli.load(fh)
    except FileNotFoundError as exc:
        raise IoError(f"config file not found: {path}") from exc
    except tomli.TOMLDecodeError as exc:
        raise InvalidArgument(f"bad config file {path}: {exc}") from exc


def _flatten(d: dict, prefix="") -> dict:
    out = {}
    for k, v in d.items():
        key = f"{prefix}{k}"
        if isinstance(v, dict) and k != "weights":
            out.update(_flatten(v, key + "."))
        else:
            out[key] = v
    return out


def resolve(preset_name: str | None = None, toml_path=None, overrides: dict | None = None) -> PipelineConfig:
    """Preset, then TOML file, then explicit overrides (``None`` values are skipped)."""
    file_values = _flatten(load_toml(toml_path)) if toml_path else {}
    name = preset_name or file_values.pop("preset", None) or "paper"
    file_values.pop("preset", None)
    cfg = preset(name).replace(file_values)
    if overrides:
        cfg = cfg.replace({k: v for k, v in overrides.items() if v is not None})
    return cfg


def git_hash() -> str | None:
    try:
        out = subprocess.run(["git", "rev-parse", "HEAD"], capture_output=True, text=True,
                             cwd=Path(__file__).resolve().parent, timeout=5)
    except (OSError, subprocess.SubprocessError):
        return None
    return out.stdout.strip() or None if out.returncode == 0 else None


def provenance(cfg: PipelineConfig) -> dict:
    return {
        "seed": cfg.seed,
        "preset": cfg.preset,
        "config_hash": cfg.config_hash(),
        "version": __version__,
        "git_hash": git_hash(),
    }


def write_json(payload: dict, path) -> None:
    """JSON output with a leading ``schema_version`` field."""
    body = {"schema_version": SCHEMA_VERSION, **payload}
    Path(path).write_text(json.dumps(body, indent=2, sort_keys=False, default=_json_default) + "\n")


def _json_default(o):
    if hasattr(o, "tolist"):
        return o.tolist()
    if is_dataclass(o):
        return asdict(o)
    raise TypeError(f"not JSON serializable: {type(o).__name__}")


def read_json(path) -> dict:
    try:
        data = json.loads(Path(path).read_text())
    except FileNotFoundError as exc:
        raise IoError(f"file not found: {path}") from exc
    except json.JSONDecodeError as exc:
        raise InvalidArgument(f"bad JSON in {path}: {exc}") from exc
    version = data.get("schema_version")
    if version != SCHEMA_VERSION:
        raise InvalidArgument(f"{path}: schema_version {version}, expected {SCHEMA_VERSION}")
    return data
