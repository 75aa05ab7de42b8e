"""Run configuration: flat dotted-key YAML files plus flag overrides.

Budgets (``attack.epsilon``, ``attack.alpha``, ``sweep.*``) are in 1/255 pixel
units here; the library works in [0, 1].
"""
from __future__ import annotations

import os
from pathlib import Path
from typing import Any, Dict, List, Literal, Mapping, Optional, Tuple

import yaml
from pydantic import BaseModel, ConfigDict, Field, ValidationError

from m2at.errors import ConfigError
from m2at.schemas.config import (
    PIXEL_SCALE,
    AblationFlags,
    AttackConfig,
    ModelConfig,
    OptimizerConfig,
    TrainConfig,
)

DATA_ROOT_ENV = "M2AT_DATA_ROOT"
RUN_CONFIG_NAME = "run_config.yaml"


class _Section(BaseModel):
    model_config = ConfigDict(extra="forbid")


class RunSection(_Section):
    output_dir: str = "runs/default"
    seed: int = 0
    deterministic: bool = True
    progress: bool = True


class DataSection(_Section):
    source: Literal["synth", "cifar10"] = "synth"
    root: Optional[str] = None
    train_samples: Optional[int] = Field(None, ge=1)
    test_samples: Optional[int] = Field(None, ge=1)
    synth_classes: int = Field(10, ge=2)
    synth_train: int = Field(2000, ge=1)
    synth_test: int = Field(500, ge=1)
    synth_shape: Tuple[int, int, int] = (3, 16, 16)
    synth_margin: float = 0.5
    synth_noise: float = 0.25


class ModelSection(_Section):
    arch: Literal["linear", "mlp", "small-cnn", "mini-wrn"] = "small-cnn"
    width: float = 1.0


class TrainSection(_Section):
    method: Literal["standard", "pgd_at", "pgd_ls", "avmixup_g1", "m2at", "ablation"] = "m2at"
    masking: bool = False
    mixing: bool = False
    label_smoothing: bool = False
    epochs: int = Field(200, ge=1)
    batch_size: int = Field(128, ge=1)
    lr: float = 0.1
    momentum: float = 0.9
    weight_decay: float = 2.0e-4
    milestones: List[float] = [0.5, 0.75]
    gamma: float = 0.1
    beta_alpha: float = 1.0
    augment: bool = True
    eval_rounds: int = 10
    select_rounds: int = 20
    eval_samples: Optional[int] = None


class AttackSection(_Section):
    method: Literal["fgsm", "pgd"] = "pgd"
    epsilon: float = 8.0
    alpha: float = 2.0
    rounds: int = 10
    loss: Literal["cross_entropy", "margin"] = "cross_entropy"
    random_start: bool = True
    clamp: bool = True


class EvalSection(_Section):
    samples: Optional[int] = Field(None, ge=1)
    batch_size: int = Field(256, ge=1)
    random_start: bool = False
    transfer_rounds: int = Field(20, ge=1)
    parquet: bool = False


class SweepSection(_Section):
    budgets: List[float] = [0, 2, 4, 8, 16, 24, 32]
    step_sizes: List[float] = [2, 4, 8]
    rounds: int = Field(10, ge=1)


class GradcheckSection(_Section):
    arch: Literal["linear", "mlp", "small-cnn", "mini-wrn"] = "small-cnn"
    input_shape: Tuple[int, int, int] = (1, 8, 8)
    classes: int = 3
    batch: int = Field(2, ge=1)
    tolerance: float = 1e-4
    max_entries: Optional[int] = Field(24, ge=1)
    width: float = 0.25


class RunConfig(_Section):
    """Everything a command needs; each section maps to a dotted key prefix."""

    run: RunSection = RunSection()
    data: DataSection = DataSection()
    model: ModelSection = ModelSection()
    train: TrainSection = TrainSection()
    attack: AttackSection = AttackSection()
    eval: EvalSection = EvalSection()
    sweep: SweepSection = SweepSection()
    gradcheck: GradcheckSection = GradcheckSection()

    def build_model_config(self, input_shape: Tuple[int, int, int], num_classes: int) -> ModelConfig:
        return ModelConfig(arch=self.model.arch, input_shape=input_shape, num_classes=num_classes, width=self.model.width)

    def attack_config(self, random_start: Optional[bool] = None, **changes: Any) -> AttackConfig:
        a = self.attack
        fields = dict(
            method=a.method,
            epsilon=a.epsilon / PIXEL_SCALE,
            step_size=a.alpha / PIXEL_SCALE,
            rounds=a.rounds,
            loss_kind=a.loss,
            random_start=a.random_start if random_start is None else random_start,
            clamp_valid_range=a.clamp,
        )
        fields.update(changes)
        return AttackConfig(**fields)

    def train_config(self) -> TrainConfig:
        t = self.train
        return TrainConfig(
            method=t.method,
            ablation=AblationFlags(masking=t.masking, mixing=t.mixing, label_smoothing=t.label_smoothing),
            epochs=t.epochs,
            batch_size=t.batch_size,
            optimizer=OptimizerConfig(
                lr=t.lr, momentum=t.momentum, weight_decay=t.weight_decay, milestones=tuple(t.milestones), gamma=t.gamma
            ),
            attack=self.attack_config(method="pgd"),
            beta_alpha=t.beta_alpha,
            seed=self.run.seed,
            augment=t.augment,
            eval_rounds=t.eval_rounds,
            select_rounds=t.select_rounds,
            eval_samples=t.eval_samples,
            eval_batch_size=self.eval.batch_size,
        )

    def data_root(self) -> Optional[Path]:
        root = self.data.root or os.environ.get(DATA_ROOT_ENV)
        return Path(root) if root else None


def flatten(config: RunConfig) -> Dict[str, Any]:
    flat: Dict[str, Any] = {}
    for section, values in config.model_dump(mode="json").items():
        for key, value in values.items():
            flat[f"{section}.{key}"] = value
    return flat


def unflatten(flat: Mapping[str, Any]) -> Dict[str, Dict[str, Any]]:
    """Split dotted keys into sections, rejecting anything RunConfig does not know."""
    sections = RunConfig.model_fields
    nested: Dict[str, Dict[str, Any]] = {}
    for dotted, value in flat.items():
        section, _, key = str(dotted).partition(".")
        if section not in sections or not key:
            raise ConfigError(f"unknown config key: {dotted}")
        known = sections[section].annotation.model_fields  # type: ignore[union-attr]
        if key not in known:
            raise ConfigError(f"unknown config key: {dotted}")
        nested.setdefault(section, {})[key] = value
    return nested


def build(flat: Mapping[str, Any]) -> RunConfig:
    try:
        return RunConfig.model_validate(unflatten(flat))
    except ValidationError as exc:
        problems = "; ".join(f"{'.'.join(str(p) for p in err['loc'])}: {err['msg']}" for err in exc.errors())
        raise ConfigError(f"invalid run config: {problems}") from None


def read_flat(path: Path) -> Dict[str, Any]:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"Config file not found: {path}")
    with open(path, "r", encoding="utf-8") as handle:
        loaded = yaml.safe_load(handle) or {}
    if not isinstance(loaded, dict):
        raise ConfigError(f"{path}: expected a flat mapping of dotted keys")
    for key, value in loaded.items():
        if isinstance(value, dict):
            raise ConfigError(f"{path}: nested section {key!r}; use dotted keys such as {key}.<field>")
    return loaded


def load_run_config(path: Optional[Path] = None, overrides: Optional[Mapping[str, Any]] = None) -> RunConfig:
    """File values first, then every non-None override on top (flags win)."""
    flat = read_flat(path) if path is not None else {}
    for key, value in (overrides or {}).items():
        if value is not None:
            flat[key] = value
    return build(flat)


def dump_run_config(config: RunConfig, output_dir: Path) -> Path:
    """Write the fully resolved config; loading it back reproduces the run."""
    output_dir = Path(output_dir)
    output_dir.mkdir(parents=True, exist_ok=True)
    path = output_dir / RUN_CONFIG_NAME
    with open(path, "w", encoding="utf-8") as handle:
        yaml.safe_dump(flatten(config), handle, sort_keys=False, default_flow_style=None)
    return path
