"""Configuration documents for nightreid.

A configuration is one YAML document with the sections ``model``, ``train``,
``loss``, ``degradation``, ``augment``, ``eval`` and ``data``. Each section is
validated by a voluptuous schema carrying the defaults, then frozen into a
dataclass. Command-line flags are applied as dotted-key overrides before
validation, so the schema is the single source of defaults.
"""
from __future__ import annotations

import copy
from dataclasses import asdict, dataclass, field, replace
import logging
from pathlib import Path
from typing import Any, Mapping

import voluptuous as vol
import yaml

from .const import ABLATIONS, DOMAINS, PRESETS
from .errors import ConfigError

_LOGGER = logging.getLogger(__name__)


def _ordered_pair(lower: float, *, strict: bool = True):
    """Validate a ``(lo, hi)`` range with ``lower < lo <= hi`` (or ``<=``)."""

    def validate(value: Any) -> tuple[float, float]:
        lo, hi = (float(v) for v in value)
        if (lo <= lower if strict else lo < lower) or lo > hi:
            bound = ">" if strict else ">="
            raise vol.Invalid(f"range must satisfy {bound} {lower} and lo <= hi, got {value}")
        return (lo, hi)

    return vol.All([vol.Coerce(float)], vol.Length(min=2, max=2), validate)


_POSITIVE_INT = vol.All(vol.Coerce(int), vol.Range(min=1))
_NON_NEGATIVE = vol.All(vol.Coerce(float), vol.Range(min=0.0))
_PROBABILITY = vol.All(vol.Coerce(float), vol.Range(min=0.0, max=1.0))
_DOMAIN_COUNTS = vol.Schema({vol.In(DOMAINS): _POSITIVE_INT})

MODEL_SCHEMA = vol.Schema(
    {
        vol.Optional("preset", default="paper"): vol.In(list(PRESETS)),
        vol.Optional("img_size"): vol.All([vol.Coerce(int)], vol.Length(min=2, max=2)),
        vol.Optional("patch_size"): _POSITIVE_INT,
        vol.Optional("embed_dim"): _POSITIVE_INT,
        vol.Optional("num_heads"): _POSITIVE_INT,
        vol.Optional("shared_depth"): _POSITIVE_INT,
        vol.Optional("reid_depth"): _POSITIVE_INT,
        vol.Optional("decoder_depth"): _POSITIVE_INT,
        vol.Optional("mlp_ratio", default=4.0): vol.All(vol.Coerce(float), vol.Range(min=1.0)),
        vol.Optional("camera_coef", default=3.0): _NON_NEGATIVE,
        vol.Optional("share_encoder", default=True): vol.Boolean(),
        vol.Optional("relight_channels", default=32): _POSITIVE_INT,
        vol.Optional("num_classes", default=dict): _DOMAIN_COUNTS,
        vol.Optional("num_cameras", default=dict): _DOMAIN_COUNTS,
    }
)

TRAIN_SCHEMA = vol.Schema(
    {
        vol.Optional("base_lr", default=0.008): vol.All(vol.Coerce(float), vol.Range(min=0.0, min_included=False)),
        vol.Optional("momentum", default=0.9): vol.All(vol.Coerce(float), vol.Range(min=0.0, max=1.0)),
        vol.Optional("weight_decay", default=1e-4): _NON_NEGATIVE,
        vol.Optional("ids_per_batch", default=16): _POSITIVE_INT,
        vol.Optional("instances_per_id", default=4): _POSITIVE_INT,
        vol.Optional("epochs", default=120): _POSITIVE_INT,
        vol.Optional("steps_per_epoch", default=0): vol.All(vol.Coerce(int), vol.Range(min=0)),
        vol.Optional("warmup_steps", default=500): vol.All(vol.Coerce(int), vol.Range(min=0)),
        vol.Optional("pattern", default=lambda: list(DOMAINS)): vol.All(
            [vol.In(DOMAINS)], vol.Length(min=1, msg="alternation pattern must not be empty")
        ),
        vol.Optional("alternation", default="iteration"): vol.In(["iteration", "epoch"]),
        vol.Optional("ablation", default=None): vol.Any(None, vol.In(list(ABLATIONS))),
        vol.Optional("checkpoint_every", default=1000): vol.All(vol.Coerce(int), vol.Range(min=0)),
        vol.Optional("eval_every", default=0): vol.All(vol.Coerce(int), vol.Range(min=0)),
        vol.Optional("seed", default=0): vol.Coerce(int),
    }
)

LOSS_SCHEMA = vol.Schema(
    {
        vol.Optional("lambda_relight", default=0.5): _NON_NEGATIVE,
        vol.Optional("lambda_distill", default=0.1): _NON_NEGATIVE,
        vol.Optional("lambda_rec", default=1.0): _NON_NEGATIVE,
        vol.Optional("lambda_ref", default=0.1): _NON_NEGATIVE,
        vol.Optional("lambda_col", default=0.2): _NON_NEGATIVE,
        vol.Optional("lambda_sa", default=0.1): _NON_NEGATIVE,
        vol.Optional("id_scale", default=1.0): vol.All(vol.Coerce(float), vol.Range(min=0.0, min_included=False)),
        vol.Optional("id_margin", default=0.0): vol.Coerce(float),
        vol.Optional("triplet_margin", default=0.3): _NON_NEGATIVE,
        vol.Optional("distill_temperature", default=1.0): vol.All(vol.Coerce(float), vol.Range(min=0.0, min_included=False)),
        vol.Optional("distill_mode", default="full"): vol.In(["full", "brightness"]),
    }
)

DEGRADATION_SCHEMA = vol.Schema(
    {
        vol.Optional("brightness_range", default=lambda: [10.0, 38.0]): _ordered_pair(0.0),
        vol.Optional("contrast_range", default=lambda: [7.0, 30.0]): _ordered_pair(0.0),
        vol.Optional("hue_range", default=lambda: [7.0, 30.0]): _ordered_pair(0.0, strict=False),
        vol.Optional("color_range", default=lambda: [20.0, 35.0]): _ordered_pair(0.0),
        vol.Optional("seed", default=0): vol.Coerce(int),
    }
)

AUGMENT_SCHEMA = vol.Schema(
    {
        vol.Optional("flip_prob", default=0.5): _PROBABILITY,
        vol.Optional("pad", default=10): vol.All(vol.Coerce(int), vol.Range(min=0)),
        vol.Optional("erase_prob", default=0.5): _PROBABILITY,
        vol.Optional("erase_area", default=lambda: [0.02, 0.4]): _ordered_pair(0.0),
        vol.Optional("erase_aspect", default=lambda: [0.3, 3.3]): _ordered_pair(0.0),
    }
)

EVAL_SCHEMA = vol.Schema(
    {
        vol.Optional("ranks", default=lambda: [1, 5, 10]): [_POSITIVE_INT],
        vol.Optional("exclude_same_camera", default=True): vol.Boolean(),
        vol.Optional("batch_size", default=64): _POSITIVE_INT,
    }
)

_OPTIONAL_PATH = vol.Any(None, str)

DATA_SCHEMA = vol.Schema(
    {
        vol.Optional("source_manifest", default=None): _OPTIONAL_PATH,
        vol.Optional("real_manifest", default=None): _OPTIONAL_PATH,
        vol.Optional("synthetic_manifest", default=None): _OPTIONAL_PATH,
        vol.Optional("query_manifest", default=None): _OPTIONAL_PATH,
        vol.Optional("gallery_manifest", default=None): _OPTIONAL_PATH,
        vol.Optional("checkpoint", default=None): _OPTIONAL_PATH,
        vol.Optional("pretrained", default=None): _OPTIONAL_PATH,
        vol.Optional("inputs", default=list): [str],
        vol.Optional("metrics_log", default=None): _OPTIONAL_PATH,
        vol.Optional("features_dir", default=None): _OPTIONAL_PATH,
        vol.Optional("out_dir", default="."): str,
    }
)

CONFIG_SCHEMA = vol.Schema(
    {
        vol.Optional("model", default=dict): MODEL_SCHEMA,
        vol.Optional("train", default=dict): TRAIN_SCHEMA,
        vol.Optional("loss", default=dict): LOSS_SCHEMA,
        vol.Optional("degradation", default=dict): DEGRADATION_SCHEMA,
        vol.Optional("augment", default=dict): AUGMENT_SCHEMA,
        vol.Optional("eval", default=dict): EVAL_SCHEMA,
        vol.Optional("data", default=dict): DATA_SCHEMA,
    }
)


@dataclass(frozen=True)
class ModelConfig:
    """Shape of the network."""

    img_size: tuple[int, int] = (256, 128)
    patch_size: int = 16
    embed_dim: int = 768
    num_heads: int = 12
    shared_depth: int = 5
    reid_depth: int = 6
    decoder_depth: int = 6
    mlp_ratio: float = 4.0
    camera_coef: float = 3.0
    share_encoder: bool = True
    relight_channels: int = 32
    num_classes: dict[str, int] = field(default_factory=dict)
    num_cameras: dict[str, int] = field(default_factory=dict)

    def __post_init__(self) -> None:
        """Check the shape invariants."""
        height, width = self.img_size
        if height % self.patch_size or width % self.patch_size:
            raise ConfigError(
                f"image size {height}x{width} is not divisible by patch size {self.patch_size}"
            )
        if self.embed_dim % self.num_heads:
            raise ConfigError(
                f"embed_dim {self.embed_dim} is not divisible by {self.num_heads} heads"
            )
        if min(self.shared_depth, self.reid_depth, self.decoder_depth) < 1:
            raise ConfigError("encoder and decoder depths must be >= 1")

    @property
    def grid_size(self) -> tuple[int, int]:
        """Return the token grid as (rows, columns)."""
        return (self.img_size[0] // self.patch_size, self.img_size[1] // self.patch_size)

    @property
    def num_patches(self) -> int:
        """Return the number of patch tokens N."""
        rows, cols = self.grid_size
        return rows * cols

    def with_data(
        self, num_classes: Mapping[str, int], num_cameras: Mapping[str, int]
    ) -> ModelConfig:
        """Return a copy sized for the given label and camera spaces."""
        return replace(self, num_classes=dict(num_classes), num_cameras=dict(num_cameras))

    @classmethod
    def from_dict(cls, data: Mapping[str, Any]) -> ModelConfig:
        """Build from a plain mapping (checkpoint headers, config sections)."""
        values = {k: v for k, v in data.items() if k != "preset"}
        values["img_size"] = tuple(values["img_size"])
        return cls(**values)

    def to_dict(self) -> dict[str, Any]:
        """Return a JSON-compatible mapping."""
        data = asdict(self)
        data["img_size"] = list(self.img_size)
        return data

    @classmethod
    def preset(cls, name: str, **kwargs: Any) -> ModelConfig:
        """Build one of the named presets."""
        values = dict(PRESETS[name])
        values["img_size"] = tuple(values["img_size"])
        values.update(kwargs)
        return cls(**values)


@dataclass(frozen=True)
class TrainConfig:
    """Optimisation and schedule settings."""

    base_lr: float = 0.008
    momentum: float = 0.9
    weight_decay: float = 1e-4
    ids_per_batch: int = 16
    instances_per_id: int = 4
    epochs: int = 120
    steps_per_epoch: int = 0
    warmup_steps: int = 500
    pattern: tuple[str, ...] = DOMAINS
    alternation: str = "iteration"
    ablation: str | None = None
    checkpoint_every: int = 1000
    eval_every: int = 0
    seed: int = 0

    @property
    def batch_size(self) -> int:
        """Return P*K."""
        return self.ids_per_batch * self.instances_per_id


@dataclass(frozen=True)
class LossWeights:
    """Loss weights and loss-internal hyperparameters."""

    lambda_relight: float = 0.5
    lambda_distill: float = 0.1
    lambda_rec: float = 1.0
    lambda_ref: float = 0.1
    lambda_col: float = 0.2
    lambda_sa: float = 0.1
    id_scale: float = 1.0
    id_margin: float = 0.0
    triplet_margin: float = 0.3
    distill_temperature: float = 1.0
    distill_mode: str = "full"

    def __post_init__(self) -> None:
        """Check that all weights are non-negative."""
        for name in ("lambda_relight", "lambda_distill", "lambda_rec", "lambda_ref", "lambda_col", "lambda_sa"):
            if getattr(self, name) < 0:
                raise ConfigError(f"{name} must be >= 0")


@dataclass(frozen=True)
class DegradationConfig:
    """Sampling ranges for synthetic night degradation."""

    brightness_range: tuple[float, float] = (10.0, 38.0)
    contrast_range: tuple[float, float] = (7.0, 30.0)
    hue_range: tuple[float, float] = (7.0, 30.0)
    color_range: tuple[float, float] = (20.0, 35.0)
    seed: int = 0


@dataclass(frozen=True)
class AugmentConfig:
    """Training augmentation settings."""

    flip_prob: float = 0.5
    pad: int = 10
    erase_prob: float = 0.5
    erase_area: tuple[float, float] = (0.02, 0.4)
    erase_aspect: tuple[float, float] = (0.3, 3.3)


@dataclass(frozen=True)
class EvalConfig:
    """Evaluation protocol settings."""

    ranks: tuple[int, ...] = (1, 5, 10)
    exclude_same_camera: bool = True
    batch_size: int = 64


@dataclass(frozen=True)
class DataConfig:
    """Paths consumed by the command line."""

    source_manifest: str | None = None
    real_manifest: str | None = None
    synthetic_manifest: str | None = None
    query_manifest: str | None = None
    gallery_manifest: str | None = None
    checkpoint: str | None = None
    pretrained: str | None = None
    inputs: tuple[str, ...] = ()
    metrics_log: str | None = None
    features_dir: str | None = None
    out_dir: str = "."


@dataclass(frozen=True)
class Config:
    """A validated configuration document."""

    model: ModelConfig = field(default_factory=ModelConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    loss: LossWeights = field(default_factory=LossWeights)
    degradation: DegradationConfig = field(default_factory=DegradationConfig)
    augment: AugmentConfig = field(default_factory=AugmentConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)
    data: DataConfig = field(default_factory=DataConfig)

    def to_dict(self) -> dict[str, Any]:
        """Return the document form accepted by :func:`load_config`."""
        doc = asdict(self)
        doc["model"] = self.model.to_dict()
        return _plain(doc)


def _plain(value: Any) -> Any:
    """Convert tuples to lists recursively so the document dumps as YAML."""
    if isinstance(value, dict):
        return {k: _plain(v) for k, v in value.items()}
    if isinstance(value, (list, tuple)):
        return [_plain(v) for v in value]
    return value


def _apply_overrides(doc: dict[str, Any], overrides: Mapping[str, Any]) -> None:
    """Set dotted keys such as ``train.base_lr`` in a raw document."""
    for dotted, value in overrides.items():
        section, _, key = dotted.partition(".")
        if not key or section not in {str(k) for k in CONFIG_SCHEMA.schema}:
            raise ConfigError(f"Unknown config key: {dotted}")
        target = doc.setdefault(section, {})
        if not isinstance(target, dict):
            raise ConfigError(f"Config section {section} is not a mapping")
        target[key] = value


def _resolve_preset(model: dict[str, Any]) -> dict[str, Any]:
    """Fill model keys that were not given explicitly from the preset."""
    resolved = dict(PRESETS[model["preset"]])
    resolved.update(model)
    return resolved


def validate_config(doc: Mapping[str, Any]) -> dict[str, Any]:
    """Validate a raw document and return it with all defaults filled."""
    try:
        validated = CONFIG_SCHEMA(copy.deepcopy(dict(doc)))
    except vol.Invalid as err:
        _LOGGER.error("Invalid configuration: %s", err)
        raise ConfigError(f"Invalid configuration: {err}") from err
    validated["model"] = _resolve_preset(validated["model"])
    return validated


def config_defaults() -> dict[str, Any]:
    """Return the fully defaulted configuration document."""
    return validate_config({})


def build_config(doc: Mapping[str, Any]) -> Config:
    """Freeze a validated document into dataclasses."""
    doc = validate_config(doc)
    train = dict(doc["train"])
    train["pattern"] = tuple(train["pattern"])
    data = dict(doc["data"])
    data["inputs"] = tuple(data["inputs"])
    return Config(
        model=ModelConfig.from_dict(doc["model"]),
        train=TrainConfig(**train),
        loss=LossWeights(**doc["loss"]),
        degradation=DegradationConfig(**doc["degradation"]),
        augment=AugmentConfig(**doc["augment"]),
        eval=EvalConfig(**{**doc["eval"], "ranks": tuple(doc["eval"]["ranks"])}),
        data=DataConfig(**data),
    )


def load_config(
    path: str | Path | None = None, overrides: Mapping[str, Any] | None = None
) -> Config:
    """Load a YAML configuration file and apply dotted-key overrides.

    Raises:
        OSError: If the file cannot be read
        ConfigError: If the document does not validate
    """
    doc: dict[str, Any] = {}
    if path is not None:
        with open(path, encoding="utf-8") as handle:
            try:
                loaded = yaml.safe_load(handle)
            except yaml.YAMLError as err:
                raise ConfigError(f"Cannot parse {path}: {err}") from err
        if loaded is None:
            loaded = {}
        if not isinstance(loaded, dict):
            raise ConfigError(f"{path} must contain a mapping at top level")
        doc = loaded
        _LOGGER.debug("Loaded configuration from %s", path)
    if overrides:
        _apply_overrides(doc, overrides)
    return build_config(doc)
