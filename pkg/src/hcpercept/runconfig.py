"""Run configuration: one validated document combining model, data, plan and loss settings.

Precedence: config file < HCP_* environment variables < command-line flags.
"""
from __future__ import annotations

import os
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Optional

import yaml

from .config import TASK_TYPES, ConfigError, ModelConfig, TaskDescriptor, full_tasks, preset
from .objectives import LossWeights
from .scenegen.loaders import DatasetManifest, parse_manifest, read_manifest
from .scenegen.samples import SIZE_POLICIES, task_classes
from .trainer.plan import MASK_MODES, SHARING_MODES, DatasetPlan, TrainPlan

DATA_ROOT_ENV = "HCP_DATA_ROOT"
ENV_KEYS = {"HCP_PRESET": "preset", "HCP_SEED": "seed", "HCP_STEPS": "steps", "HCP_SHARING_MODE": "sharing_mode",
            "HCP_MASK_MODE": "mask_mode", DATA_ROOT_ENV: "data_root"}
# query counts for task types whose slot count is not a dataset property
DEFAULT_QUERIES = {"reid": 2, "peddet": 10}


@dataclass
class RunConfig:
    preset: str = "toy"
    seed: int = 0
    sharing_mode: str = "baseline"
    mask_mode: str = "full"
    sizes: str = "toy"
    steps: Optional[int] = None
    data_root: Optional[str] = None
    model: dict = field(default_factory=dict)        # overrides of the preset, {"encoder": {...}, "decoder": {...}}
    tasks: Optional[list] = None                     # None: derive one task per dataset
    datasets: list = field(default_factory=list)
    manifests: list = field(default_factory=list)    # paths of manifest files merged into datasets
    plan: dict = field(default_factory=dict)
    loss: dict = field(default_factory=dict)
    synthetic: dict = field(default_factory=lambda: {"samples": 16, "identities": 4})
    eval_batch_size: int = 16
    checkpoint_every: int = 0

    def __post_init__(self):
        if self.sharing_mode not in SHARING_MODES:
            raise ConfigError(f"unknown sharing mode {self.sharing_mode!r}")
        if self.mask_mode not in MASK_MODES:
            raise ConfigError(f"unknown mask mode {self.mask_mode!r}")
        if self.sizes not in SIZE_POLICIES:
            raise ConfigError(f"unknown size policy {self.sizes!r}")
        if self.steps is not None and int(self.steps) < 1:
            raise ConfigError("steps must be >= 1")
        self.seed = int(self.seed)
        self.datasets = [d if isinstance(d, DatasetManifest) else _manifest(d, i) for i, d in enumerate(self.datasets)]
        if self.tasks is not None:
            self.tasks = [t if isinstance(t, TaskDescriptor) else _task(t, i) for i, t in enumerate(self.tasks)]
        self.model_config()
        self.loss_weights()
        unknown_plan = set(self.plan) - set(TrainPlan.__dataclass_fields__)
        if unknown_plan:
            raise ConfigError(f"unknown plan keys: {sorted(unknown_plan)}")

    # ---------------------------------------------------------------- resolution

    def model_config(self) -> ModelConfig:
        base = preset(self.preset).to_dict()
        for part, over in self.model.items():
            if part not in base:
                raise ConfigError(f"unknown model section {part!r}")
            bad = set(over) - set(base[part])
            if bad:
                raise ConfigError(f"unknown {part} keys: {sorted(bad)}")
            base[part].update(over)
        return ModelConfig.from_dict(base)

    def loss_weights(self) -> LossWeights:
        bad = set(self.loss) - set(LossWeights.__dataclass_fields__)
        if bad:
            raise ConfigError(f"unknown loss keys: {sorted(bad)}")
        try:
            return LossWeights(**self.loss)
        except ValueError as e:
            raise ConfigError(str(e)) from None

    def size_policy(self) -> dict:
        return SIZE_POLICIES[self.sizes]

    def task_list(self, slots: Optional[dict] = None) -> list:
        """Explicit tasks, else one per distinct dataset task id; slots maps task_id -> data slot count."""
        if self.tasks is not None:
            return list(self.tasks)
        if not self.datasets:
            return full_tasks() if self.preset == "full" else []
        out, seen = [], set()
        for d in self.datasets:
            if d.task_id in seen:
                continue
            seen.add(d.task_id)
            n = d.options.get("num_queries")
            if n is None and d.task_type in DEFAULT_QUERIES:
                n = DEFAULT_QUERIES[d.task_type]
            if n is None and slots and slots.get(d.task_id):
                n = slots[d.task_id]
            if n is None:
                n = len(task_classes(d.task_type))
            out.append(TaskDescriptor(d.task_id, d.task_type, int(n)))
        return out

    def train_plan(self) -> TrainPlan:
        d = dict(self.plan)
        d["sharing_mode"] = self.sharing_mode
        d["mask_mode"] = self.mask_mode
        d["seed"] = self.seed
        if self.steps is not None:
            d["total_steps"] = int(self.steps)
            d["warmup_steps"] = min(d.get("warmup_steps", 1500), max(0, int(self.steps) - 1))
        d["datasets"] = [DatasetPlan(m.dataset_id, m.task_id, m.task_type, int(m.batch_size)) for m in self.datasets]
        try:
            return TrainPlan.from_dict(d)
        except TypeError as e:
            raise ConfigError(f"bad plan: {e}") from None

    def to_dict(self) -> dict:
        d = asdict(self)
        d["datasets"] = [asdict(m) for m in self.datasets]
        if self.tasks is not None:
            d["tasks"] = [{**asdict(t), "class_names": list(t.class_names) if t.class_names else None}
                          for t in self.tasks]
        return d


def _manifest(d, i) -> DatasetManifest:
    if not isinstance(d, dict):
        raise ConfigError(f"dataset entry {i} is not a mapping")
    return parse_manifest({"datasets": [d]})[0]


def _task(t, i) -> TaskDescriptor:
    if not isinstance(t, dict):
        raise ConfigError(f"task entry {i} is not a mapping")
    bad = set(t) - set(TaskDescriptor.__dataclass_fields__)
    if bad:
        raise ConfigError(f"task entry {i}: unknown keys {sorted(bad)}")
    try:
        names = t.get("class_names")
        return TaskDescriptor(t["task_id"], t["task_type"], int(t["num_queries"]),
                              tuple(names) if names is not None else None)
    except KeyError as e:
        raise ConfigError(f"task entry {i}: missing {e}") from None


def _coerce_env(key: str, value: str):
    if key in ("seed", "steps"):
        try:
            return int(value)
        except ValueError:
            raise ConfigError(f"environment override for {key} must be an integer, got {value!r}") from None
    return value


def load_run_config(path=None, env: Optional[dict] = None, flags: Optional[dict] = None) -> RunConfig:
    """Read a YAML config (optional), then apply environment and flag overrides."""
    doc = {}
    base = Path(".")
    if path is not None:
        try:
            with open(path) as f:
                doc = yaml.safe_load(f) or {}
        except OSError as e:
            raise ConfigError(f"cannot read config {path}: {e}") from None
        except yaml.YAMLError as e:
            raise ConfigError(f"config {path} is not valid YAML: {e}") from None
        if not isinstance(doc, dict):
            raise ConfigError(f"config {path} must be a mapping")
        base = Path(path).parent
    unknown = set(doc) - set(RunConfig.__dataclass_fields__)
    if unknown:
        raise ConfigError(f"unknown config keys: {sorted(unknown)}")
    env = os.environ if env is None else env
    for var, key in ENV_KEYS.items():
        if env.get(var):
            doc[key] = _coerce_env(key, env[var])
    for key, value in (flags or {}).items():
        if value is not None:
            doc[key] = value
    datasets = list(doc.get("datasets") or [])
    for mpath in doc.get("manifests") or []:
        p = Path(mpath)
        p = p if p.is_absolute() else base / p
        if not p.is_file():
            raise ConfigError(f"referenced manifest {p} does not exist")
        for m in read_manifest(p):
            d = asdict(m)
            # manifest roots are relative to the manifest file
            if not Path(m.root).is_absolute():
                d["root"] = str(p.parent / m.root)
            datasets.append(d)
    doc["datasets"] = datasets
    try:
        cfg = RunConfig(**doc)
    except TypeError as e:
        raise ConfigError(f"bad config: {e}") from None
    if cfg.data_root is None and path is not None:
        cfg = replace(cfg, data_root=str(base))
    _check_ids(cfg)
    return cfg


def _check_ids(cfg: RunConfig):
    ids = [d.dataset_id for d in cfg.datasets]
    if len(set(ids)) != len(ids):
        raise ConfigError("dataset ids must be unique")
    if cfg.tasks is not None:
        tasks = {t.task_id: t for t in cfg.tasks}
        for d in cfg.datasets:
            if d.task_id not in tasks:
                raise ConfigError(f"dataset {d.dataset_id!r} feeds unknown task {d.task_id!r}")
            if tasks[d.task_id].task_type != d.task_type:
                raise ConfigError(f"dataset {d.dataset_id!r} is {d.task_type} but task {d.task_id!r} is "
                                  f"{tasks[d.task_id].task_type}")
    for d in cfg.datasets:
        if d.task_type not in TASK_TYPES:
            raise ConfigError(f"dataset {d.dataset_id!r}: unknown task type")
