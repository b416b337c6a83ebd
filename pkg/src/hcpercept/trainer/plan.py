"""Training plan: per-dataset loss weights, learning-rate schedule, layer-wise decay."""
from __future__ import annotations

import math
import re
from dataclasses import asdict, dataclass, field

from ..config import TASK_TYPES, ConfigError

DEFAULT_SAMPLE_WEIGHTS = {"reid": 10.0, "par": 0.01, "seg": 5.0, "pose": 2000.0, "peddet": 2.0}
SHARING_MODES = ("baseline", "per_task_interpreter", "encoder_only", "per_task_type")
MASK_MODES = ("full", "prompt_queries", "prompt_deep")


@dataclass
class DatasetPlan:
    name: str
    task_id: str
    task_type: str
    batch_size: int
    # per-GPU placement is documentation only; all datasets run in one process
    gpus: int = 1

    def __post_init__(self):
        if self.task_type not in TASK_TYPES:
            raise ConfigError(f"dataset {self.name!r}: unknown task type {self.task_type!r}")
        if self.batch_size < 1:
            raise ConfigError(f"dataset {self.name!r}: batch size must be >= 1")


@dataclass
class TrainPlan:
    datasets: list = field(default_factory=list)
    sample_weights: dict = field(default_factory=lambda: dict(DEFAULT_SAMPLE_WEIGHTS))
    det_batch_factor: float = 0.6
    det_micro_batches: int = 1
    total_steps: int = 105_000
    warmup_steps: int = 1500
    peak_lr: float = 1e-3
    layer_decay: float = 0.75
    weight_decay: float = 0.05
    drop_path: float = 0.2
    beta1: float = 0.9
    beta2_cap: float = 0.999
    sharing_mode: str = "baseline"
    mask_mode: str = "full"
    seed: int = 0

    def __post_init__(self):
        self.datasets = [d if isinstance(d, DatasetPlan) else DatasetPlan(**d) for d in self.datasets]
        names = [d.name for d in self.datasets]
        if len(set(names)) != len(names):
            raise ConfigError("dataset names must be unique")
        if any(w <= 0 for w in self.sample_weights.values()):
            raise ConfigError("sample weights must be > 0")
        if not 0 <= self.warmup_steps < self.total_steps:
            raise ConfigError("warmup_steps must be in [0, total_steps)")
        if self.sharing_mode not in SHARING_MODES:
            raise ConfigError(f"unknown sharing mode {self.sharing_mode!r}")
        if self.mask_mode not in MASK_MODES:
            raise ConfigError(f"unknown mask mode {self.mask_mode!r}")
        if self.det_micro_batches < 1:
            raise ConfigError("det_micro_batches must be >= 1")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "TrainPlan":
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise ConfigError(f"unknown plan keys: {sorted(unknown)}")
        return cls(**d)


def loss_weight_products(plan: TrainPlan) -> dict:
    """Unnormalized b_D * w_t per dataset."""
    if not plan.datasets:
        raise ConfigError("plan has no datasets")
    prods = {}
    for d in plan.datasets:
        try:
            prods[d.name] = d.batch_size * plan.sample_weights[d.task_type]
        except KeyError:
            raise ConfigError(f"no sample weight for task type {d.task_type!r}") from None
    return prods


def compute_loss_weights(plan: TrainPlan) -> dict:
    """w_D = b_D * w_t / sum over datasets of b * w_t."""
    prods = loss_weight_products(plan)
    total = math.fsum(prods.values())
    return {k: v / total for k, v in prods.items()}


def allocate_batches(total_batch: int, dataset_sizes: dict, task_types: dict, det_factor: float = 0.6) -> dict:
    """Split a global batch proportionally to dataset size; detection shares are scaled by det_factor."""
    n = sum(dataset_sizes.values())
    out = {}
    for name, size in dataset_sizes.items():
        b = total_batch * size / n
        if task_types[name] == "peddet":
            b *= det_factor
        out[name] = max(1, int(round(b)))
    return out


def lr_at(step: int, plan: TrainPlan) -> float:
    """Linear warmup to peak at warmup_steps, cosine decay to 0 at total_steps. lr_at(0) == 0."""
    if step < 0 or step > plan.total_steps:
        raise ValueError(f"step {step} outside [0, {plan.total_steps}]")
    if plan.warmup_steps and step < plan.warmup_steps:
        return plan.peak_lr * step / plan.warmup_steps
    progress = (step - plan.warmup_steps) / (plan.total_steps - plan.warmup_steps)
    return 0.5 * plan.peak_lr * (1 + math.cos(math.pi * progress))


_BLOCK = re.compile(r"^encoder\.block(\d+)\.")
_NON_ENCODER = ("decoder.", "decoders.", "interpreter.", "interpreters.", "queries.", "aux.")


def layer_decay_scale(name: str, plan: TrainPlan, encoder_depth: int) -> float:
    """Top encoder block gets decay**1, each block below one more power; stem gets decay**(depth+1)."""
    m = _BLOCK.match(name)
    if m:
        i = int(m.group(1))
        if i >= encoder_depth:
            raise ValueError(f"{name}: block index beyond encoder depth {encoder_depth}")
        return plan.layer_decay ** (encoder_depth - i)
    if name.startswith(("encoder.patch_proj.", "encoder.pos_embed")):
        return plan.layer_decay ** (encoder_depth + 1)
    if name.startswith("encoder.norm."):
        return 1.0
    if name.startswith(_NON_ENCODER):
        return 1.0
    raise ValueError(f"cannot resolve parameter {name!r} to a layer-decay group")
