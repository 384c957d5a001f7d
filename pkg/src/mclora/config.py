"""JSON run configuration with strict keys, type checks and layered overrides.

Precedence, lowest first: built-in defaults, the config file, the
``MCLORA_SEED`` environment variable, command-line flags.
"""

from __future__ import annotations

import json
import math
import os
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

from .errors import ConfigError
from .layer import MixtureConfig
from .sweep import STRATEGIES, SweepGrid
from .tasks import SyntheticTask
from .trainer import TrainConfig

SEED_ENV = "MCLORA_SEED"


@dataclass
class TaskSection:
    kind: str = "cluster"
    dim: int = 16
    n_classes: int = 4
    seed: int = 0
    noise: float = 1.0
    separation: float = 3.0
    seq_len: int = 16
    parity_window: int = 2
    shift: float = math.pi / 3  # rotation applied to the source task to get the target task
    n_train: int = 128
    n_val: int = 2000
    pretrain_samples: int = 4000


@dataclass
class ModelSection:
    arch: str = "mlp"
    rank: int = 8
    placement: str = "all"
    lora_alpha: float = 16.0
    pretrain_steps: int = 800
    pretrain_lr: float = 1e-2


@dataclass
class TrainSection:
    learning_rate: float = 0.3
    batch_size: int = 32
    steps: int = 200
    optimizer: str = "sgd"
    eval_every: int = 0
    schedule: str = "constant"
    clip_norm: float = 1.0
    cooperative: bool = True


@dataclass
class SweepSection:
    strategies: list = field(default_factory=lambda: ["lora", "monteclora"])
    learning_rates: list = field(default_factory=lambda: [1.0, 0.3, 0.1])
    batch_sizes: list = field(default_factory=lambda: [8, 32, 64])
    seeds: list = field(default_factory=lambda: [0, 1, 2, 3, 4])


@dataclass
class Config:
    seed: int = 0
    strategy: str = "monteclora"
    task: TaskSection = field(default_factory=TaskSection)
    model: ModelSection = field(default_factory=ModelSection)
    mixture: MixtureConfig = field(default_factory=MixtureConfig)
    train: TrainSection = field(default_factory=TrainSection)
    sweep: SweepSection = field(default_factory=SweepSection)

    def to_dict(self) -> dict:
        return asdict(self)

    def canonical_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n"

    # -- views used by the subcommands ---------------------------------------------------

    def source_task(self) -> SyntheticTask:
        t = self.task
        return SyntheticTask(t.kind, t.dim, t.n_classes, t.seed, 0.0, t.noise, t.separation, t.seq_len,
                             t.parity_window)

    def train_config(self) -> TrainConfig:
        posthoc = self.train.steps // 2 if self.strategy == "monteclora-posthoc" else None
        return TrainConfig(seed=self.seed, posthoc_after=posthoc, **asdict(self.train))

    def grid(self, single: bool = False) -> SweepGrid:
        """Sweep grid; ``single`` gives the 1x1x1 grid of the train subcommand."""
        sw = self.sweep
        return SweepGrid(
            strategies=(self.strategy,) if single else tuple(sw.strategies),
            learning_rates=(self.train.learning_rate,) if single else tuple(sw.learning_rates),
            batch_sizes=(self.train.batch_size,) if single else tuple(sw.batch_sizes),
            seeds=(self.seed,) if single else tuple(sw.seeds),
            task=self.source_task(), shift=self.task.shift, n_train=self.task.n_train, n_val=self.task.n_val,
            steps=self.train.steps, optimizer=self.train.optimizer, schedule=self.train.schedule,
            arch=self.model.arch, rank=self.model.rank, placement=self.model.placement,
            lora_alpha=self.model.lora_alpha, mixture=self.mixture,
            pretrain_steps=self.model.pretrain_steps, pretrain_lr=self.model.pretrain_lr,
            pretrain_samples=self.task.pretrain_samples,
        )


SECTIONS = {"task": TaskSection, "model": ModelSection, "mixture": MixtureConfig, "train": TrainSection,
            "sweep": SweepSection}


def _coerce(key: str, value, default):
    """Check ``value`` against the type of the field default."""
    if isinstance(default, bool):
        if not isinstance(value, bool):
            raise ConfigError(f"{key}: expected a boolean, got {value!r}", key)
        return value
    if isinstance(default, int) and not isinstance(default, bool):
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(f"{key}: expected an integer, got {value!r}", key)
        return value
    if isinstance(default, float):
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"{key}: expected a number, got {value!r}", key)
        return float(value)
    if isinstance(default, str):
        if not isinstance(value, str):
            raise ConfigError(f"{key}: expected a string, got {value!r}", key)
        return value
    if isinstance(default, list):
        if not isinstance(value, list):
            raise ConfigError(f"{key}: expected a list, got {value!r}", key)
        return value
    if default is None:
        if value is not None and (isinstance(value, bool) or not isinstance(value, int)):
            raise ConfigError(f"{key}: expected an integer or null, got {value!r}", key)
        return value
    return value


def _merge_section(cls, data: dict, prefix: str):
    if not isinstance(data, dict):
        raise ConfigError(f"{prefix}: expected a table of settings", prefix)
    defaults = cls()
    values = {}
    names = {f.name for f in fields(cls)}
    for key, value in data.items():
        if key not in names:
            raise ConfigError(f"unknown config key {prefix}.{key}", f"{prefix}.{key}")
        values[key] = _coerce(f"{prefix}.{key}", value, getattr(defaults, key))
    try:
        return cls(**{**asdict(defaults), **values})
    except ConfigError as exc:
        raise ConfigError(str(exc), f"{prefix}.{exc.key}") from None


def from_dict(data: dict) -> Config:
    if not isinstance(data, dict):
        raise ConfigError("config root must be a table", "")
    defaults = Config()
    kwargs = {}
    for key, value in data.items():
        if key in SECTIONS:
            kwargs[key] = _merge_section(SECTIONS[key], value, key)
        elif key in ("seed", "strategy"):
            kwargs[key] = _coerce(key, value, getattr(defaults, key))
        else:
            raise ConfigError(f"unknown config key {key}", key)
    cfg = Config(**kwargs)
    validate(cfg)
    return cfg


def validate(cfg: Config) -> None:
    if cfg.strategy not in STRATEGIES:
        raise ConfigError(f"strategy must be one of {list(STRATEGIES)}, got {cfg.strategy!r}", "strategy")
    cfg.source_task()
    TrainConfig(**asdict(cfg.train))
    cfg.grid()


def set_path(data: dict, path: str, value) -> None:
    """Assign ``value`` at a dotted key path inside a nested dict."""
    parts = path.split(".")
    node = data
    for part in parts[:-1]:
        node = node.setdefault(part, {})
        if not isinstance(node, dict):
            raise ConfigError(f"{path}: {part} is not a table", path)
    node[parts[-1]] = value


def parse_assignment(text: str) -> tuple[str, object]:
    """``key.path=value``; the value is parsed as JSON, falling back to a plain string."""
    if "=" not in text:
        raise ConfigError(f"override {text!r} must look like key.path=value", text)
    key, raw = text.split("=", 1)
    try:
        value = json.loads(raw)
    except json.JSONDecodeError:
        value = raw
    return key.strip(), value


def load_config(path=None, overrides: dict | None = None, env=None) -> Config:
    """Resolve a Config from an optional JSON file, the seed env var and flag overrides."""
    data = {}
    if path is not None:
        text = Path(path).read_text()
        if text.strip():
            try:
                data = json.loads(text)
            except json.JSONDecodeError as exc:
                raise ConfigError(f"{path}: invalid JSON ({exc.msg} at line {exc.lineno})", "") from None
    env = os.environ if env is None else env
    if env.get(SEED_ENV) not in (None, ""):
        try:
            data["seed"] = int(env[SEED_ENV])
        except ValueError:
            raise ConfigError(f"{SEED_ENV} must be an integer, got {env[SEED_ENV]!r}", SEED_ENV) from None
    for key, value in (overrides or {}).items():
        set_path(data, key, value)
    return from_dict(data)


def write_resolved(cfg: Config, out_dir) -> Path:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    path = out / "resolved-config.json"
    path.write_text(cfg.canonical_json())
    return path
