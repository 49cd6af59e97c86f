"""
Experiment configuration

Dataclass configs with embedded defaults, read from TOML and written back by a
small emitter restricted to this schema. validate() runs the cross-field checks
and raises ConfigError naming the offending field or interval.
"""

import json
import logging
import math
try:
    import tomllib
except ModuleNotFoundError:  # Python < 3.11
    import tomli as tomllib
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path
from typing import Any, Dict, List, Tuple, Union, get_args, get_origin

from voxslice.errors import ConfigError
from voxslice.vsf import (
    DEFAULT_INTERVALS_M,
    MODES,
    SCENE_Z_MAX_M,
    SCENE_Z_MIN_M,
    HeightPartition,
    partition_from_intervals,
)

logger = logging.getLogger(__name__)

ATTENTION_VARIANTS = ("seattention3d", "senet")
OPTIMIZERS = ("sgd", "momentum")
ALPHA_MODES = ("uniform", "inverse_frequency")
SIZE_GROUPS = ("small", "large")


@dataclass(frozen=True)
class ClassHeightProfile:
    """One synthetic class: its height band in meters and box footprint in voxels."""

    class_id: int
    name: str
    height_band: Tuple[float, float]
    footprint: Tuple[int, int]
    weight: float = 1.0
    size_group: str = "large"


DEFAULT_CLASSES = (
    ClassHeightProfile(1, "ground-plane", (-5.0, -4.5), (8, 16), 1.0, "large"),
    ClassHeightProfile(2, "barrier-like", (-4.5, -3.5), (1, 3), 2.0, "small"),
    ClassHeightProfile(3, "pedestrian-like", (-2.0, 2.0), (1, 2), 2.0, "small"),
    ClassHeightProfile(4, "car-like", (-4.5, -2.5), (3, 5), 2.0, "large"),
    ClassHeightProfile(5, "truck-like", (-4.5, 0.0), (4, 7), 1.0, "large"),
    ClassHeightProfile(6, "vegetation-like", (-1.0, 3.0), (2, 5), 1.5, "large"),
)


@dataclass(frozen=True)
class SceneConfig:
    grid: Tuple[int, int, int] = (24, 24, 16)
    z_min_m: float = SCENE_Z_MIN_M
    z_max_m: float = SCENE_Z_MAX_M
    channels: int = 8
    objects_per_scene: int = 10
    max_retries: int = 50
    sigma_cam: float = 0.5
    sigma_lidar: float = 0.2
    cam_jitter: int = 1
    cam_class_strength: float = 1.5
    lidar_class_strength: float = 0.15
    feature_seed: int = 1234
    classes: Tuple[ClassHeightProfile, ...] = DEFAULT_CLASSES

    @property
    def num_classes(self) -> int:
        """K, including the empty class 0."""
        return len(self.classes) + 1

    @property
    def voxel_size_m(self) -> float:
        return (self.z_max_m - self.z_min_m) / self.grid[2]

    @property
    def class_names(self) -> Tuple[str, ...]:
        return tuple(c.name for c in self.classes)

    def group(self, size_group: str) -> Tuple[int, ...]:
        return tuple(c.class_id for c in self.classes if c.size_group == size_group)

    def band_voxels(self, profile: ClassHeightProfile) -> Tuple[int, int]:
        """Half-open z index range of voxels lying entirely inside the band."""
        lo_m, hi_m = profile.height_band
        vm = self.voxel_size_m
        lo = math.ceil((lo_m - self.z_min_m) / vm - 1e-9)
        hi = math.floor((hi_m - self.z_min_m) / vm + 1e-9)
        return lo, hi

    def validate(self) -> None:
        if len(self.grid) != 3 or any(d <= 0 for d in self.grid):
            raise ConfigError(f"scene.grid must be three positive sizes, got {list(self.grid)}")
        if not self.z_min_m < self.z_max_m:
            raise ConfigError(f"scene z range [{self.z_min_m:g}, {self.z_max_m:g}] m is empty")
        if self.channels < len(self.classes):
            raise ConfigError(
                f"scene.channels={self.channels} is smaller than the {len(self.classes)} classes"
            )
        for name in ("objects_per_scene", "max_retries"):
            if getattr(self, name) <= 0:
                raise ConfigError(f"scene.{name} must be positive, got {getattr(self, name)}")
        for name in ("sigma_cam", "sigma_lidar", "cam_jitter"):
            if getattr(self, name) < 0:
                raise ConfigError(f"scene.{name} must be non-negative, got {getattr(self, name)}")
        if not self.classes:
            raise ConfigError("scene.classes is empty")
        ids = [c.class_id for c in self.classes]
        if ids != list(range(1, len(ids) + 1)):
            raise ConfigError(f"scene.classes ids must run 1..{len(ids)} in order, got {ids}")
        if self.num_classes > 256:
            raise ConfigError(f"at most 255 semantic classes fit the label format, got {len(ids)}")
        for c in self.classes:
            lo_m, hi_m = c.height_band
            if not (self.z_min_m <= lo_m < hi_m <= self.z_max_m):
                raise ConfigError(
                    f"class {c.name!r} band [{lo_m:g}, {hi_m:g}] m is not inside "
                    f"[{self.z_min_m:g}, {self.z_max_m:g}] m"
                )
            lo, hi = self.band_voxels(c)
            if hi <= lo:
                raise ConfigError(f"class {c.name!r} band [{lo_m:g}, {hi_m:g}] m covers no whole voxel")
            if not (1 <= c.footprint[0] <= c.footprint[1]):
                raise ConfigError(f"class {c.name!r} footprint {list(c.footprint)} must satisfy 1 <= min <= max")
            if c.weight <= 0:
                raise ConfigError(f"class {c.name!r} weight must be positive, got {c.weight}")
            if c.size_group not in SIZE_GROUPS:
                raise ConfigError(f"class {c.name!r} size_group must be one of {SIZE_GROUPS}")


@dataclass(frozen=True)
class ModelConfig:
    channels: int = 8
    in_channels: int = 8
    num_classes: int = 7
    reduction: int = 4
    partition: Tuple[Tuple[float, float], ...] = DEFAULT_INTERVALS_M
    grid_z: int = 16
    z_min_m: float = SCENE_Z_MIN_M
    z_max_m: float = SCENE_Z_MAX_M
    vsf_mode: str = "full"
    attention: str = "seattention3d"
    encoder_depth: int = 2
    seed: int = 0

    @classmethod
    def for_scene(cls, scene: SceneConfig, **overrides) -> "ModelConfig":
        """A model config whose input side matches scene."""
        values = dict(
            in_channels=scene.channels,
            num_classes=scene.num_classes,
            grid_z=scene.grid[2],
            z_min_m=scene.z_min_m,
            z_max_m=scene.z_max_m,
        )
        values.update(overrides)
        return cls(**values)

    def height_partition(self) -> HeightPartition:
        return partition_from_intervals(self.partition, self.grid_z, self.z_min_m, self.z_max_m)

    def validate(self) -> None:
        for name in ("channels", "in_channels", "reduction", "encoder_depth", "grid_z"):
            if getattr(self, name) <= 0:
                raise ConfigError(f"model.{name} must be positive, got {getattr(self, name)}")
        if self.num_classes < 2:
            raise ConfigError(f"model.num_classes must be at least 2, got {self.num_classes}")
        if self.channels % self.reduction != 0:
            raise ConfigError(
                f"model.channels={self.channels} is not divisible by model.reduction={self.reduction}"
            )
        if self.vsf_mode not in MODES:
            raise ConfigError(f"model.vsf_mode must be one of {MODES}, got {self.vsf_mode!r}")
        if self.attention not in ATTENTION_VARIANTS:
            raise ConfigError(f"model.attention must be one of {ATTENTION_VARIANTS}, got {self.attention!r}")
        self.height_partition()


@dataclass(frozen=True)
class TrainConfig:
    steps: int = 200
    batch_size: int = 1
    learning_rate: float = 0.1
    optimizer: str = "sgd"
    momentum: float = 0.9
    eval_every: int = 50
    seeds: Tuple[int, ...] = (0, 1, 2, 3, 4)
    n_train: int = 16
    n_val: int = 4
    data_seed: int = 0

    def validate(self) -> None:
        if self.steps < 0:
            raise ConfigError(f"train.steps must be non-negative, got {self.steps}")
        for name in ("batch_size", "eval_every", "n_train", "n_val"):
            if getattr(self, name) <= 0:
                raise ConfigError(f"train.{name} must be positive, got {getattr(self, name)}")
        if not self.learning_rate > 0:
            raise ConfigError(f"train.learning_rate must be positive, got {self.learning_rate}")
        if self.optimizer not in OPTIMIZERS:
            raise ConfigError(f"train.optimizer must be one of {OPTIMIZERS}, got {self.optimizer!r}")
        if not 0 <= self.momentum < 1:
            raise ConfigError(f"train.momentum must lie in [0, 1), got {self.momentum}")
        if not self.seeds:
            raise ConfigError("train.seeds is empty")
        if len(set(self.seeds)) != len(self.seeds):
            raise ConfigError(f"train.seeds has duplicates: {list(self.seeds)}")


@dataclass(frozen=True)
class LossConfig:
    gamma: float = 2.0
    alpha: str = "inverse_frequency"
    weights: Tuple[float, float, float, float] = (1.0, 1.0, 1.0, 1.0)

    def validate(self) -> None:
        if self.gamma < 0:
            raise ConfigError(f"loss.gamma must be non-negative, got {self.gamma}")
        if self.alpha not in ALPHA_MODES:
            raise ConfigError(f"loss.alpha must be one of {ALPHA_MODES}, got {self.alpha!r}")
        if len(self.weights) != 4 or any(w < 0 for w in self.weights):
            raise ConfigError(f"loss.weights must be four non-negative values, got {list(self.weights)}")


@dataclass(frozen=True)
class PathsConfig:
    data_dir: str = "data"
    out_dir: str = "runs"


@dataclass(frozen=True)
class ExperimentConfig:
    scene: SceneConfig = field(default_factory=SceneConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    loss: LossConfig = field(default_factory=LossConfig)
    paths: PathsConfig = field(default_factory=PathsConfig)

    def validate(self) -> "ExperimentConfig":
        self.scene.validate()
        self.model.validate()
        self.train.validate()
        self.loss.validate()
        pairs = (
            ("in_channels", "channels", self.scene.channels),
            ("num_classes", "num_classes", self.scene.num_classes),
            ("grid_z", "grid[2]", self.scene.grid[2]),
            ("z_min_m", "z_min_m", self.scene.z_min_m),
            ("z_max_m", "z_max_m", self.scene.z_max_m),
        )
        for model_field, scene_field, expected in pairs:
            actual = getattr(self.model, model_field)
            if actual != expected:
                raise ConfigError(
                    f"model.{model_field}={actual} does not match scene.{scene_field}={expected}"
                )
        return self

    def with_model(self, **changes) -> "ExperimentConfig":
        return replace(self, model=replace(self.model, **changes))


# ---- reading --------------------------------------------------------------

def _describe(tp) -> str:
    if tp is int:
        return "an integer"
    if tp is float:
        return "a number"
    if tp is str:
        return "a string"
    if tp is bool:
        return "a boolean"
    if tp is ClassHeightProfile:
        return "a table"
    args = get_args(tp)
    if len(args) == 2 and args[1] is Ellipsis:
        return "a list"
    return f"a list of {len(args)} values"


def _coerce(value: Any, tp, where: str, key: str) -> Any:
    """value checked against the field annotation tp; TOML lists become tuples."""
    bad = ConfigError(f"[{where}] {key} must be {_describe(tp)}, got {value!r}")
    if tp is bool:
        if not isinstance(value, bool):
            raise bad
        return value
    if tp is int:
        if isinstance(value, bool) or not isinstance(value, int):
            raise bad
        return value
    if tp is float:
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise bad
        return float(value)
    if tp is str:
        if not isinstance(value, str):
            raise bad
        return value
    if tp is ClassHeightProfile:
        return _build(ClassHeightProfile, value, f"{where}.{key}")
    if get_origin(tp) is tuple:
        if not isinstance(value, (list, tuple)):
            raise bad
        args = get_args(tp)
        if len(args) == 2 and args[1] is Ellipsis:
            return tuple(_coerce(v, args[0], where, f"{key}[{i}]") for i, v in enumerate(value))
        if len(value) != len(args):
            raise bad
        return tuple(_coerce(v, a, where, f"{key}[{i}]") for i, (v, a) in enumerate(zip(value, args)))
    raise ConfigError(f"[{where}] {key} has an unsupported type")


def _build(cls, data: Dict[str, Any], where: str):
    if not isinstance(data, dict):
        raise ConfigError(f"[{where}] must be a table")
    known = {f.name: f for f in fields(cls)}
    unknown = sorted(set(data) - set(known))
    if unknown:
        raise ConfigError(f"unknown key(s) in [{where}]: {', '.join(unknown)}")
    values = {key: _coerce(value, known[key].type, where, key) for key, value in data.items()}
    try:
        return cls(**values)
    except TypeError as exc:
        raise ConfigError(f"[{where}]: {exc}") from exc


def config_from_dict(data: Dict[str, Any]) -> ExperimentConfig:
    sections = {
        "scene": SceneConfig,
        "model": ModelConfig,
        "train": TrainConfig,
        "loss": LossConfig,
        "paths": PathsConfig,
    }
    unknown = sorted(set(data) - set(sections))
    if unknown:
        raise ConfigError(f"unknown config section(s): {', '.join(unknown)}")
    built = {name: _build(cls, data.get(name, {}), name) for name, cls in sections.items()}
    return ExperimentConfig(**built)


def model_config_from_dict(data: Dict[str, Any]) -> ModelConfig:
    """A ModelConfig from its asdict() form, as stored in checkpoints."""
    return _build(ModelConfig, data, "model")


def loads_config(text: str) -> ExperimentConfig:
    try:
        data = tomllib.loads(text)
    except tomllib.TOMLDecodeError as exc:
        raise ConfigError(f"invalid TOML: {exc}") from exc
    return config_from_dict(data).validate()


def load_config(path: Union[str, Path, None]) -> ExperimentConfig:
    """Load and validate a config file; None gives the validated defaults."""
    if path is None:
        return ExperimentConfig().validate()
    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(f"config file not found: {path}")
    logger.debug("loading config %s", path)
    return loads_config(path.read_text(encoding="utf-8"))


# ---- writing --------------------------------------------------------------

def _toml_value(value: Any) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, int):
        return str(value)
    if isinstance(value, float):
        if math.isnan(value):
            return "nan"
        if math.isinf(value):
            return "inf" if value > 0 else "-inf"
        return repr(value)
    if isinstance(value, str):
        return json.dumps(value)
    if isinstance(value, (list, tuple)):
        return "[" + ", ".join(_toml_value(v) for v in value) + "]"
    raise ConfigError(f"cannot write {type(value).__name__} to TOML")


def dump_toml(cfg: ExperimentConfig) -> str:
    """Emit only what the config schema holds: scalars, lists and [[scene.classes]] tables."""
    lines: List[str] = []
    for section, table in asdict(cfg).items():
        lines.append(f"[{section}]")
        nested = []
        for key, value in table.items():
            if key == "classes":
                nested = value
                continue
            lines.append(f"{key} = {_toml_value(value)}")
        lines.append("")
        for entry in nested:
            lines.append(f"[[{section}.classes]]")
            lines.extend(f"{k} = {_toml_value(v)}" for k, v in entry.items())
            lines.append("")
    return "\n".join(lines)


def save_config(cfg: ExperimentConfig, path: Union[str, Path]) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(dump_toml(cfg), encoding="utf-8")
    return path
