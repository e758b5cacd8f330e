"""Configuration management for the sketch-to-saliency tool.

Configuration is layered, lowest precedence first:

1. preset defaults (``TrainConfig.desk_scale()`` / ``TrainConfig.full_scale()``)
2. a JSON config file whose keys mirror the dataclass field names
3. ``.env`` file and environment variables prefixed with ``SKETCHSAL_``
   (``SKETCHSAL_EPOCHS=5``, ``SKETCHSAL_SYNTH_CANVAS=128``,
   ``SKETCHSAL_AFFINE_ROTATION_RANGE=-10,10``)
4. explicit overrides (command-line flags)
"""

import hashlib
import json
import os
from dataclasses import dataclass, field, fields, asdict, replace
from pathlib import Path
from typing import Any, Dict, List, Optional, Tuple

from dotenv import load_dotenv

from src.errors import ConfigError


ENV_PREFIX = "SKETCHSAL_"

TRUTHY = ("true", "1", "yes", "on")

SHAPE_KINDS = ("circle", "rectangle", "triangle", "star")

TRANSFORM_KINDS = ("identity", "hflip", "vflip", "rotate", "scale")

ABLATIONS = (
    "no_eqv",
    "attention_1d",
    "single_scale",
    "no_pen_state",
    "l1_regression",
    "raw_offsets",
)

# Ablations that change the parameter layout of the model.
STRUCTURAL_ABLATIONS = ("attention_1d", "single_scale", "no_pen_state", "l1_regression")

FULL_CHANNELS = (512, 512, 256)


@dataclass
class AffineConfig:
    """Sampling ranges for the equivariance transform.

    Attributes:
        kind_weights: Relative weight of each transform kind; kinds with
            weight 0 are never drawn
        rotation_range: (min, max) rotation in degrees
        scale_range: (min, max) isotropic scale factor
    """
    kind_weights: Dict[str, float] = field(
        default_factory=lambda: {"hflip": 0.5, "rotate": 0.25, "scale": 0.25}
    )
    rotation_range: Tuple[float, float] = (-15.0, 15.0)
    scale_range: Tuple[float, float] = (0.8, 1.2)

    def validate(self) -> List[str]:
        errors = []
        for kind, weight in self.kind_weights.items():
            if kind not in TRANSFORM_KINDS:
                errors.append(f"Invalid affine kind '{kind}': must be one of {list(TRANSFORM_KINDS)}")
            if weight < 0:
                errors.append(f"Invalid weight for affine kind '{kind}': must be non-negative")
        lo, hi = self.rotation_range
        if lo > hi:
            errors.append("Invalid AFFINE_ROTATION_RANGE: min must not exceed max")
        lo, hi = self.scale_range
        if lo <= 0 or lo > hi:
            errors.append("Invalid AFFINE_SCALE_RANGE: must satisfy 0 < min <= max")
        return errors


@dataclass
class SynthConfig:
    """Synthetic photo/sketch/mask generation settings.

    Attributes:
        canvas: Side length of the square canvas in pixels
        shapes: Shape vocabulary to draw from
        texture_level: Amplitude of the background texture in [0, 1]
        area_bounds: (min, max) fraction of the canvas covered by the shape
        n_train, n_val, n_test: Split sizes
        rdp_epsilon: Simplification tolerance in pixels; None scales the
            2.0 px at 256x256 default to the canvas
        min_shape_size: Smallest allowed shape extent in pixels
        line_width: Rasterization width used for sketch renderings
        seed: Base seed for the whole dataset
    """
    canvas: int = 64
    shapes: Tuple[str, ...] = SHAPE_KINDS
    texture_level: float = 0.15
    area_bounds: Tuple[float, float] = (0.05, 0.4)
    n_train: int = 500
    n_val: int = 100
    n_test: int = 100
    rdp_epsilon: Optional[float] = None
    min_shape_size: int = 8
    line_width: int = 1
    seed: int = 0

    @property
    def epsilon(self) -> float:
        """RDP tolerance in pixels for this canvas."""
        if self.rdp_epsilon is not None:
            return self.rdp_epsilon
        return 2.0 * self.canvas / 256.0

    def validate(self) -> List[str]:
        errors = []
        if self.canvas <= 0:
            errors.append("Invalid SYNTH_CANVAS: must be positive")
        if not self.shapes:
            errors.append("Invalid SYNTH_SHAPES: at least one shape kind is required")
        for kind in self.shapes:
            if kind not in SHAPE_KINDS:
                errors.append(f"Invalid SYNTH_SHAPES entry '{kind}': must be one of {list(SHAPE_KINDS)}")
        if not 0.0 <= self.texture_level <= 1.0:
            errors.append("Invalid SYNTH_TEXTURE_LEVEL: must be in [0, 1]")
        lo, hi = self.area_bounds
        if not 0.0 < lo < hi < 1.0:
            errors.append("Invalid SYNTH_AREA_BOUNDS: must satisfy 0 < min < max < 1")
        for name in ("n_train", "n_val", "n_test"):
            if getattr(self, name) < 0:
                errors.append(f"Invalid SYNTH_{name.upper()}: must be non-negative")
        if self.rdp_epsilon is not None and self.rdp_epsilon < 0:
            errors.append("Invalid SYNTH_RDP_EPSILON: must be non-negative")
        if self.min_shape_size < 2:
            errors.append("Invalid SYNTH_MIN_SHAPE_SIZE: must be at least 2")
        if self.line_width < 1:
            errors.append("Invalid SYNTH_LINE_WIDTH: must be at least 1")
        return errors


@dataclass
class TrainConfig:
    """Model, training and evaluation settings.

    The defaults are the desk-scale preset; ``full_scale()`` returns the
    published hyperparameters.

    Attributes:
        lr: Adam learning rate (constant, no schedule)
        batch_size: Photo/sketch pairs per step
        epochs: Number of passes over the training split
        T_max: Maximum decoding length
        M: Number of bivariate normal mixture components
        image_side: Photo side after resizing; must be divisible by 32
        backbone: "tiny" (6 conv layers) or "full" (VGG-16 layout)
        channels: Pyramid channels at /32, /16, /8
        hidden_size: Decoder LSTM width d_h
        attention_size: Attention embedding width d
        ablations: Enabled ablation flags (see ABLATIONS)
        seed: Seed for initialization, shuffling and transform sampling
        grad_clip: Global gradient-norm clip, 0 disables
        loss_weights: Weights of the coord/stroke/eqv losses
        deterministic: Force deterministic kernels
        jobs: DataLoader worker processes (0 = in-process)
        temperature: Default sampling temperature for generation
        photo_normalization: "none" (raw [0,1]) or "imagenet"
        pretrained_weights: Optional VGG-16 ``features.*`` state dict
        probe_epochs, probe_lr: Linear-probe training schedule
        finetune_epochs, finetune_lr: Fractional fine-tuning schedule
        eval_modes: Decoding modes reported by evaluation
        max_fbeta_per_image: Average per-image max F instead of the dataset curve
        visualize_every: Steps between attention-progress frames
        affine: Equivariance transform sampling
        synth: Synthetic data generation
    """
    lr: float = 1e-3
    batch_size: int = 16
    epochs: int = 40
    T_max: int = 48
    M: int = 10
    image_side: int = 64
    backbone: str = "tiny"
    channels: Tuple[int, int, int] = (32, 32, 16)
    hidden_size: int = 64
    attention_size: int = 32
    ablations: Tuple[str, ...] = ()
    seed: int = 0
    grad_clip: float = 1.0
    loss_weights: Dict[str, float] = field(
        default_factory=lambda: {"coord": 1.0, "stroke": 1.0, "eqv": 1.0}
    )
    deterministic: bool = False
    jobs: int = 0
    temperature: float = 0.4
    photo_normalization: str = "none"
    pretrained_weights: Optional[str] = None
    probe_epochs: int = 20
    probe_lr: float = 1e-2
    finetune_epochs: int = 20
    finetune_lr: float = 1e-3
    eval_modes: Tuple[str, ...] = ("free_running", "teacher_forced")
    max_fbeta_per_image: bool = False
    visualize_every: int = 10
    affine: AffineConfig = field(default_factory=AffineConfig)
    synth: SynthConfig = field(default_factory=SynthConfig)

    @classmethod
    def desk_scale(cls) -> "TrainConfig":
        """Tiny backbone, 64x64 photos, T_max 48, M 10, 40 epochs."""
        return cls()

    @classmethod
    def full_scale(cls) -> "TrainConfig":
        """VGG-16 backbone, 256x256 photos, T_max 250, M 20, lr 1e-4, batch 16, 50 epochs."""
        return cls(
            lr=1e-4,
            batch_size=16,
            epochs=50,
            T_max=250,
            M=20,
            image_side=256,
            backbone="full",
            channels=FULL_CHANNELS,
            hidden_size=512,
            attention_size=256,
            synth=SynthConfig(canvas=256),
        )

    def has(self, ablation: str) -> bool:
        """Whether an ablation flag is enabled."""
        return ablation in self.ablations

    def weight(self, component: str) -> float:
        """Effective loss weight, with ablations zeroing their component."""
        if component == "eqv" and self.has("no_eqv"):
            return 0.0
        if component == "coord" and self.has("no_pen_state"):
            return 0.0
        return float(self.loss_weights.get(component, 1.0))

    @property
    def attention_grid(self) -> int:
        return self.image_side // 32

    @classmethod
    def load(
        cls,
        config_file: Optional[str] = None,
        env_file: str = ".env",
        overrides: Optional[Dict[str, Any]] = None,
        preset: str = "desk",
    ) -> "TrainConfig":
        """Load configuration from preset, JSON file, environment and overrides.

        Args:
            config_file: Optional JSON file mirroring field names; nested
                "affine" and "synth" objects update the sub-configs
            env_file: Path to the .env file (default: ".env")
            overrides: Highest-precedence values (e.g. from CLI flags);
                None values are ignored
            preset: "desk" or "full"

        Returns:
            TrainConfig: Loaded and validated configuration

        Raises:
            ConfigError: If any source is unreadable or the result is invalid
        """
        if preset == "desk":
            config = cls.desk_scale()
        elif preset == "full":
            config = cls.full_scale()
        else:
            raise ConfigError(f"Unknown preset '{preset}'", {"valid": "desk, full"})

        if config_file:
            path = Path(config_file)
            if not path.exists():
                raise ConfigError("Config file not found", {"file_path": str(path)})
            try:
                data = json.loads(path.read_text(encoding="utf-8"))
            except json.JSONDecodeError as e:
                raise ConfigError("Config file is not valid JSON", {"file_path": str(path), "cause": str(e)})
            if not isinstance(data, dict):
                raise ConfigError("Config file must contain a JSON object", {"file_path": str(path)})
            config = config.merged(data)

        env_path = Path(env_file)
        if env_path.exists():
            load_dotenv(env_path)
        config = config.merged(_environment_values())

        if overrides:
            config = config.merged({k: v for k, v in overrides.items() if v is not None})

        config.validate()
        return config

    def merged(self, values: Dict[str, Any]) -> "TrainConfig":
        """Return a copy with ``values`` applied, coercing each to its field type."""
        known = {f.name: f for f in fields(self)}
        updates: Dict[str, Any] = {}
        for key, value in values.items():
            if key not in known:
                raise ConfigError(f"Unknown configuration key '{key}'")
            if key in ("affine", "synth"):
                current = getattr(self, key)
                if not isinstance(value, dict):
                    raise ConfigError(f"'{key}' must be an object")
                updates[key] = _merge_section(current, value, key)
            else:
                updates[key] = _coerce(getattr(self, key), value, key)
        return replace(self, **updates)

    def validate(self) -> None:
        """Validate the configuration.

        Raises:
            ConfigError: Listing every violation found
        """
        errors = []

        for name in ("lr", "temperature", "probe_lr", "finetune_lr"):
            if getattr(self, name) <= 0:
                errors.append(f"Invalid {name.upper()}: must be positive")
        for name in ("batch_size", "epochs", "T_max", "M", "image_side",
                     "hidden_size", "attention_size", "visualize_every"):
            if getattr(self, name) <= 0:
                errors.append(f"Invalid {name.upper()}: must be positive")
        for name in ("probe_epochs", "finetune_epochs", "jobs"):
            if getattr(self, name) < 0:
                errors.append(f"Invalid {name.upper()}: must be non-negative")
        if self.grad_clip < 0:
            errors.append("Invalid GRAD_CLIP: must be non-negative")

        if self.image_side > 0 and self.image_side % 32 != 0:
            errors.append(f"Invalid IMAGE_SIDE: {self.image_side} is not divisible by 32")

        if self.backbone not in ("tiny", "full"):
            errors.append("Invalid BACKBONE: must be one of ['tiny', 'full']")
        if len(self.channels) != 3 or any(c <= 0 for c in self.channels):
            errors.append("Invalid CHANNELS: expected three positive widths (/32, /16, /8)")
        elif self.backbone == "full" and tuple(self.channels) != FULL_CHANNELS:
            errors.append(f"Invalid CHANNELS: the full backbone produces {list(FULL_CHANNELS)}")

        for flag in self.ablations:
            if flag not in ABLATIONS:
                errors.append(f"Invalid ABLATIONS entry '{flag}': must be one of {list(ABLATIONS)}")

        for key in self.loss_weights:
            if key not in ("coord", "stroke", "eqv"):
                errors.append(f"Invalid LOSS_WEIGHTS key '{key}'")
        if any(w < 0 for w in self.loss_weights.values()):
            errors.append("Invalid LOSS_WEIGHTS: weights must be non-negative")

        if self.photo_normalization not in ("none", "imagenet"):
            errors.append("Invalid PHOTO_NORMALIZATION: must be one of ['none', 'imagenet']")
        for mode in self.eval_modes:
            if mode not in ("free_running", "teacher_forced"):
                errors.append(f"Invalid EVAL_MODES entry '{mode}'")

        if self.pretrained_weights and self.backbone != "full":
            errors.append("Invalid PRETRAINED_WEIGHTS: only the full backbone accepts VGG-16 weights")

        errors.extend(self.affine.validate())
        errors.extend(self.synth.validate())

        if errors:
            error_message = "Configuration validation failed:\n"
            for error in errors:
                error_message += f"  - {error}\n"
            error_message += f"\nSet via config file, {ENV_PREFIX}* environment variables or command-line flags"
            raise ConfigError(error_message)

    def model_fields(self) -> Dict[str, Any]:
        """The fields that determine the parameter layout."""
        return {
            "backbone": self.backbone,
            "channels": list(self.channels),
            "hidden_size": self.hidden_size,
            "attention_size": self.attention_size,
            "M": self.M,
            "ablations": sorted(a for a in self.ablations if a in STRUCTURAL_ABLATIONS),
        }

    def fingerprint(self) -> str:
        """SHA-256 over the model-structure fields."""
        payload = json.dumps(self.model_fields(), sort_keys=True)
        return hashlib.sha256(payload.encode("utf-8")).hexdigest()

    def to_dict(self) -> Dict[str, Any]:
        data = asdict(self)
        for key, value in list(data.items()):
            if isinstance(value, tuple):
                data[key] = list(value)
        for section in ("affine", "synth"):
            for key, value in list(data[section].items()):
                if isinstance(value, tuple):
                    data[section][key] = list(value)
        return data

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> "TrainConfig":
        """Rebuild a config stored by ``to_dict`` (e.g. inside a checkpoint)."""
        return cls().merged(data)


def _environment_values() -> Dict[str, Any]:
    """Collect SKETCHSAL_* variables into a nested override dict (raw strings)."""
    values: Dict[str, Any] = {}
    top = {f.name.upper(): f.name for f in fields(TrainConfig)}
    sections = {
        "AFFINE_": ("affine", {f.name.upper(): f.name for f in fields(AffineConfig)}),
        "SYNTH_": ("synth", {f.name.upper(): f.name for f in fields(SynthConfig)}),
    }
    for env_key, raw in os.environ.items():
        if not env_key.startswith(ENV_PREFIX):
            continue
        name = env_key[len(ENV_PREFIX):]
        for prefix, (section, names) in sections.items():
            if name.startswith(prefix) and name[len(prefix):] in names:
                values.setdefault(section, {})[names[name[len(prefix):]]] = raw
                break
        else:
            if name in top and top[name] not in ("affine", "synth"):
                values[top[name]] = raw
    return values


def _merge_section(current, values: Dict[str, Any], section: str):
    known = {f.name for f in fields(current)}
    updates = {}
    for key, value in values.items():
        if key not in known:
            raise ConfigError(f"Unknown configuration key '{section}.{key}'")
        updates[key] = _coerce(getattr(current, key), value, f"{section}.{key}")
    return replace(current, **updates)


def _coerce(default: Any, value: Any, name: str) -> Any:
    """Convert ``value`` to the type of ``default``; strings come from the environment."""
    try:
        if isinstance(default, bool):
            if isinstance(value, str):
                return value.strip().lower() in TRUTHY
            return bool(value)
        if isinstance(default, int) and not isinstance(default, bool):
            if isinstance(value, float) and not value.is_integer():
                raise ValueError(f"expected an integer, got {value}")
            return int(value)
        if isinstance(default, float):
            return float(value)
        if isinstance(default, dict):
            if isinstance(value, str):
                value = json.loads(value)
            if not isinstance(value, dict):
                raise ValueError("expected an object")
            return {str(k): float(v) for k, v in value.items()}
        if isinstance(default, tuple):
            if isinstance(value, str):
                items = [item.strip() for item in value.split(",") if item.strip()]
            else:
                items = list(value)
            if default:
                element = default[0]
                return tuple(_coerce(element, item, name) for item in items)
            return tuple(str(item) for item in items)
        if default is None:
            if value is None or (isinstance(value, str) and value.strip().lower() in ("", "none", "null")):
                return None
            if name.endswith("rdp_epsilon"):
                return float(value)
            return str(value)
        return str(value)
    except (TypeError, ValueError, json.JSONDecodeError) as e:
        raise ConfigError(f"Invalid value for '{name}'", {"value": value, "cause": str(e)})
