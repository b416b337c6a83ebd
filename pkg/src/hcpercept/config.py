"""Model configuration dataclasses and the two size presets."""
from __future__ import annotations

from dataclasses import asdict, dataclass, field
from typing import Optional

TASK_TYPES = ("reid", "par", "seg", "pose", "peddet")


class ConfigError(ValueError):
    """Raised for structurally invalid configuration."""


@dataclass(frozen=True)
class EncoderConfig:
    depth: int = 12
    width: int = 768
    heads: int = 12
    patch_size: int = 16
    ffn_hidden: int = 3072
    pos_grid: int = 84
    drop_path_rate: float = 0.2
    pos_interp: str = "bilinear"

    def __post_init__(self):
        if self.depth < 1:
            raise ConfigError("encoder depth must be >= 1")
        if self.width % self.heads:
            raise ConfigError(f"encoder width {self.width} not divisible by heads {self.heads}")
        if not 0.0 <= self.drop_path_rate < 1.0:
            raise ConfigError("drop_path_rate must lie in [0, 1)")
        if self.pos_interp not in ("bilinear", "bicubic"):
            raise ConfigError(f"unknown pos_interp {self.pos_interp!r}")


@dataclass(frozen=True)
class DecoderConfig:
    depth: int = 9
    width: int = 256
    heads: int = 8
    ffn_hidden: int = 2048
    # one coordinate projector for both token and anchor positions
    share_coord_proj: bool = True
    prompt_tokens: int = 0

    def __post_init__(self):
        if self.depth < 1:
            raise ConfigError("decoder depth must be >= 1")
        if self.width % self.heads:
            raise ConfigError(f"decoder width {self.width} not divisible by heads {self.heads}")
        if self.width % 4:
            raise ConfigError("decoder width must be divisible by 4 for the 2-D sine encoding")


@dataclass(frozen=True)
class ModelConfig:
    encoder: EncoderConfig = field(default_factory=EncoderConfig)
    decoder: DecoderConfig = field(default_factory=DecoderConfig)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        return cls(EncoderConfig(**d.get("encoder", {})), DecoderConfig(**d.get("decoder", {})))


@dataclass(frozen=True)
class TaskDescriptor:
    task_id: str
    task_type: str
    num_queries: int
    class_names: Optional[tuple] = None

    def __post_init__(self):
        if self.task_type not in TASK_TYPES:
            raise ConfigError(f"unknown task_type {self.task_type!r}")
        if self.num_queries < 1:
            raise ConfigError(f"task {self.task_id!r} needs at least one query")
        if "." in self.task_id:
            raise ConfigError("task_id may not contain '.'")
        if self.class_names is not None and len(self.class_names) != self.num_queries:
            raise ConfigError(f"task {self.task_id!r}: {len(self.class_names)} class names for {self.num_queries} queries")


def full_preset() -> ModelConfig:
    return ModelConfig(EncoderConfig(), DecoderConfig())


def toy_preset(drop_path_rate: float = 0.0) -> ModelConfig:
    return ModelConfig(
        EncoderConfig(depth=2, width=64, heads=4, patch_size=8, ffn_hidden=256, pos_grid=16,
                      drop_path_rate=drop_path_rate),
        DecoderConfig(depth=2, width=64, heads=4, ffn_hidden=256),
    )


PRESETS = {"full": full_preset, "toy": toy_preset}


def preset(name: str) -> ModelConfig:
    try:
        return PRESETS[name]()
    except KeyError:
        raise ConfigError(f"unknown preset {name!r}; choose from {sorted(PRESETS)}") from None


def full_tasks() -> list[TaskDescriptor]:
    """A task inventory shaped like the joint-training setup (two ReID sub-tasks)."""
    return [
        TaskDescriptor("reid-general", "reid", 6),
        TaskDescriptor("reid-cloth-change", "reid", 6),
        TaskDescriptor("par-attributes", "par", 35),
        TaskDescriptor("seg-parsing", "seg", 20),
        TaskDescriptor("pose-coco", "pose", 17),
        TaskDescriptor("peddet", "peddet", 100),
    ]
