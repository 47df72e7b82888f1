"""Shared domain types: class taxonomy, samples, datasets, run configuration."""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field

import numpy as np

DEFAULT_CLASS_NAMES = (
    "background",
    "crack",
    "cornerfracture",
    "seambroken",
    "patch",
    "repair",
    "slab",
    "track",
    "light",
)

SPLITS = ("train", "val", "test")
WEIGHTING_MODES = ("per_pixel", "per_image", "none")
REDUCTIONS = ("mean", "sum")
BOUNDARY_FUSION_SOURCES = ("features", "map")


class ConfigError(ValueError):
    """Invalid configuration or generator specification."""


class DataLoadError(ValueError):
    """Dataset directory or file contents violate the on-disk contract."""


class ShapeError(ValueError):
    """Array shape incompatible with an operation's requirements."""


class NumericError(RuntimeError):
    """Non-finite values encountered where finite math is required."""


@dataclass(frozen=True)
class ClassTaxonomy:
    """Ordered label space. Ids must be exactly 0..C-1 with no gaps."""

    classes: tuple[tuple[int, str], ...]
    background_id: int = 0

    def __post_init__(self):
        classes = tuple((int(i), str(n)) for i, n in self.classes)
        object.__setattr__(self, "classes", classes)
        ids = [i for i, _ in classes]
        if not ids or sorted(ids) != list(range(len(ids))):
            raise ConfigError(f"class ids must be exactly 0..C-1 without duplicates, got {ids}")
        if self.background_id not in ids:
            raise ConfigError(f"background_id {self.background_id} is not a class id")

    @property
    def num_classes(self) -> int:
        return len(self.classes)

    @property
    def names(self) -> tuple[str, ...]:
        return tuple(name for _, name in sorted(self.classes))

    def name_of(self, class_id: int) -> str:
        return self.names[class_id]

    def id_of(self, name: str) -> int:
        for i, n in self.classes:
            if n == name:
                return i
        raise KeyError(name)

    def foreground_ids(self) -> tuple[int, ...]:
        return tuple(i for i, _ in sorted(self.classes) if i != self.background_id)

    @classmethod
    def default(cls) -> "ClassTaxonomy":
        return cls(tuple(enumerate(DEFAULT_CLASS_NAMES)), background_id=0)

    def to_text(self) -> str:
        return "".join(f"{i} {n}\n" for i, n in sorted(self.classes))

    @classmethod
    def from_text(cls, text: str) -> "ClassTaxonomy":
        classes = []
        for line in text.splitlines():
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            ident, name = line.split(maxsplit=1)
            classes.append((int(ident), name))
        return cls(tuple(classes))


@dataclass
class Sample:
    """One gray-scale image with its label mask and optional boundary target."""

    image: np.ndarray  # H x W float32 in [0, 1]
    labels: np.ndarray  # H x W int64 class ids
    id: str
    boundary: np.ndarray | None = None  # H x W uint8 in {0, 1}

    def validate(self, taxonomy: ClassTaxonomy) -> None:
        if self.image.ndim != 2 or self.labels.ndim != 2:
            raise ShapeError(f"sample '{self.id}': image and labels must be 2-D")
        if self.image.shape != self.labels.shape:
            raise ShapeError(
                f"sample '{self.id}': image {self.image.shape} and labels "
                f"{self.labels.shape} must share spatial dimensions"
            )
        bad = (self.labels < 0) | (self.labels >= taxonomy.num_classes)
        if bad.any():
            y, x = np.argwhere(bad)[0]
            raise DataLoadError(
                f"sample '{self.id}': label value {int(self.labels[y, x])} at pixel "
                f"({int(y)}, {int(x)}) outside 0..{taxonomy.num_classes - 1}"
            )
        if self.boundary is not None:
            if self.boundary.shape != self.labels.shape:
                raise ShapeError(f"sample '{self.id}': boundary shape mismatch")
            if not np.isin(self.boundary, (0, 1)).all():
                raise DataLoadError(f"sample '{self.id}': boundary must be binary")


@dataclass
class Dataset:
    """A list of samples belonging to one split, sharing one taxonomy."""

    samples: list[Sample]
    split: str
    taxonomy: ClassTaxonomy = field(default_factory=ClassTaxonomy.default)

    def __len__(self) -> int:
        return len(self.samples)


@dataclass(frozen=True)
class TrainConfig:
    """Hyperparameters and architecture knobs for one training run.

    ``width_divisor`` uniformly shrinks every layer's filter count for
    desk-scale runs; 1 keeps the full architecture. ``decay`` is the
    optimizer's squared-gradient EMA decay; ``lr_decay`` is an optional
    per-epoch learning-rate factor (1.0 disables it).
    """

    input_size: tuple[int, int] = (512, 512)
    learning_rate: float = 1e-4
    decay: float = 0.995
    epochs: int = 150
    lambda_seg: float = 1.0
    lambda_boundary: float = 1.0
    weighting_mode: str = "per_pixel"
    seed: int = 0
    batch_size: int = 2
    width_divisor: int = 1
    backbone_blocks: tuple[int, int, int, int] = (3, 4, 23, 3)
    projection_depth: int = 512
    lr_decay: float = 1.0
    reduction: str = "mean"
    boundary_fusion_source: str = "features"
    attention_cap: int = 4096

    @classmethod
    def desk(cls, **overrides) -> "TrainConfig":
        """Small configuration that trains in seconds on a laptop CPU."""
        base = dict(
            input_size=(128, 128),
            batch_size=2,
            width_divisor=8,
            backbone_blocks=(1, 1, 1, 1),
        )
        base.update(overrides)
        return cls(**base)


_TUPLE_FIELDS = {"input_size": 2, "backbone_blocks": 4}


def validate_config(cfg: TrainConfig) -> list[str]:
    """Return a list of invariant violations; empty when the config is valid."""
    problems = []
    if not (cfg.learning_rate > 0):
        problems.append("learning_rate must be > 0")
    if not (0 < cfg.decay <= 1):
        problems.append("decay must be in (0,1]")
    if cfg.epochs < 0:
        problems.append("epochs must be >= 0")
    if cfg.lambda_seg < 0:
        problems.append("lambda_seg must be >= 0")
    if cfg.lambda_boundary < 0:
        problems.append("lambda_boundary must be >= 0")
    if cfg.weighting_mode not in WEIGHTING_MODES:
        problems.append(f"weighting_mode must be one of {WEIGHTING_MODES}")
    if cfg.seed < 0:
        problems.append("seed must be >= 0")
    if cfg.batch_size < 1:
        problems.append("batch_size must be >= 1")
    size = cfg.input_size
    if len(size) != 2 or any(s <= 0 for s in size):
        problems.append("input_size must be two positive integers")
    elif any(s % 32 for s in size):
        problems.append("input_size must be divisible by 32")
    if cfg.width_divisor < 1:
        problems.append("width_divisor must be >= 1")
    if len(cfg.backbone_blocks) != 4 or any(b < 1 for b in cfg.backbone_blocks):
        problems.append("backbone_blocks must be four integers >= 1")
    if cfg.projection_depth < 1:
        problems.append("projection_depth must be >= 1")
    if not (0 < cfg.lr_decay <= 1):
        problems.append("lr_decay must be in (0,1]")
    if cfg.reduction not in REDUCTIONS:
        problems.append(f"reduction must be one of {REDUCTIONS}")
    if cfg.boundary_fusion_source not in BOUNDARY_FUSION_SOURCES:
        problems.append(f"boundary_fusion_source must be one of {BOUNDARY_FUSION_SOURCES}")
    if cfg.attention_cap < 1:
        problems.append("attention_cap must be >= 1")
    return problems


def config_to_text(cfg: TrainConfig) -> str:
    """Serialize a config to flat ``key = value`` lines (one field per line)."""
    lines = []
    for f in dataclasses.fields(TrainConfig):
        value = getattr(cfg, f.name)
        if f.name in _TUPLE_FIELDS:
            rendered = ",".join(str(int(v)) for v in value)
        elif isinstance(value, float):
            rendered = repr(value)
        else:
            rendered = str(value)
        lines.append(f"{f.name} = {rendered}\n")
    return "".join(lines)


def config_from_text(text: str) -> TrainConfig:
    """Parse the flat key/value format written by :func:`config_to_text`."""
    fields = {f.name: f for f in dataclasses.fields(TrainConfig)}
    values: dict[str, object] = {}
    for lineno, line in enumerate(text.splitlines(), start=1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected 'key = value', got {line!r}")
        key, _, raw = line.partition("=")
        key, raw = key.strip(), raw.strip()
        if key not in fields:
            raise ConfigError(f"line {lineno}: unknown config key {key!r}")
        values[key] = parse_config_value(key, raw)
    return TrainConfig(**values)


def parse_config_value(key: str, raw: str):
    """Coerce a raw string to the declared type of TrainConfig field ``key``."""
    fields = {f.name: f for f in dataclasses.fields(TrainConfig)}
    if key not in fields:
        raise ConfigError(f"unknown config key {key!r}")
    default = getattr(TrainConfig(), key)
    try:
        if key in _TUPLE_FIELDS:
            parts = [int(p) for p in raw.replace("x", ",").split(",") if p.strip()]
            if len(parts) == 1 and _TUPLE_FIELDS[key] == 2:
                parts = parts * 2
            if len(parts) != _TUPLE_FIELDS[key]:
                raise ValueError(f"expected {_TUPLE_FIELDS[key]} integers")
            return tuple(parts)
        if isinstance(default, bool):
            return raw.lower() in ("1", "true", "yes", "on")
        if isinstance(default, int):
            return int(raw)
        if isinstance(default, float):
            return float(raw)
        return raw
    except ValueError as exc:
        raise ConfigError(f"config key {key!r}: cannot parse {raw!r} ({exc})") from exc
