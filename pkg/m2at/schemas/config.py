"""Configuration models for models, attacks, optimizer and training."""
from __future__ import annotations

from typing import Literal, Optional, Tuple

from pydantic import BaseModel, ConfigDict, Field, field_validator, model_validator

PIXEL_SCALE = 255.0

ArchKind = Literal["linear", "mlp", "small-cnn", "mini-wrn"]
AttackMethod = Literal["fgsm", "pgd"]
LossKind = Literal["cross_entropy", "margin"]
TrainMethod = Literal["standard", "pgd_at", "pgd_ls", "avmixup_g1", "m2at", "ablation"]

CONV_KINDS = ("small-cnn", "mini-wrn")


class ModelConfig(BaseModel):
    """Architecture descriptor: f maps R^{c x h x w} to R^K."""

    model_config = ConfigDict(extra="forbid", frozen=True)

    arch: ArchKind = "small-cnn"
    input_shape: Tuple[int, int, int] = (3, 32, 32)
    num_classes: int = 10
    width: float = 1.0

    @field_validator("num_classes")
    @classmethod
    def _at_least_two_classes(cls, value: int) -> int:
        if value < 2:
            raise ValueError(f"num_classes must be >= 2, got {value}")
        return value

    @field_validator("width")
    @classmethod
    def _positive_width(cls, value: float) -> float:
        if value <= 0:
            raise ValueError(f"width multiplier must be > 0, got {value}")
        return value

    @model_validator(mode="after")
    def _input_extents(self) -> "ModelConfig":
        c, h, w = self.input_shape
        if min(c, h, w) < 1:
            raise ValueError(f"input extents must be >= 1, got {self.input_shape}")
        if self.arch in CONV_KINDS and min(h, w) < 4:
            raise ValueError(f"{self.arch} needs input extents >= 4, got {self.input_shape}")
        return self


class AttackConfig(BaseModel):
    """l-infinity attack contract; budgets are in [0, 1] pixel units.

    ``epsilon = 0`` is accepted as the null attack (output equals input) so
    the zero-budget cell of an epsilon sweep needs no special case.
    """

    model_config = ConfigDict(extra="forbid", frozen=True)

    method: AttackMethod = "pgd"
    epsilon: float = 8 / PIXEL_SCALE
    step_size: float = 2 / PIXEL_SCALE
    rounds: int = 10
    loss_kind: LossKind = "cross_entropy"
    random_start: bool = False
    clamp_valid_range: bool = True
    allow_overstep: bool = False

    @model_validator(mode="after")
    def _budget(self) -> "AttackConfig":
        if not 0.0 <= self.epsilon <= 1.0:
            raise ValueError(f"epsilon must lie in [0, 1], got {self.epsilon}")
        if self.rounds < 1:
            raise ValueError(f"rounds must be >= 1, got {self.rounds}")
        if self.method == "pgd" and self.epsilon > 0:
            if self.step_size <= 0:
                raise ValueError(f"step_size must be > 0, got {self.step_size}")
            if self.step_size > self.epsilon and not self.allow_overstep:
                raise ValueError(
                    f"step_size {self.step_size} exceeds epsilon {self.epsilon} (set allow_overstep to permit)"
                )
        return self

    @classmethod
    def from_pixels(cls, epsilon: float = 8, step_size: float = 2, **kwargs) -> "AttackConfig":
        """Build from budgets expressed in 1/255 units."""
        return cls(epsilon=epsilon / PIXEL_SCALE, step_size=step_size / PIXEL_SCALE, **kwargs)

    def replace(self, **changes) -> "AttackConfig":
        return AttackConfig(**{**self.model_dump(), **changes})

    @property
    def label(self) -> str:
        if self.method == "fgsm":
            return "FGSM"
        prefix = "CW" if self.loss_kind == "margin" else "PGD"
        return f"{prefix}-{self.rounds}"


class OptimizerConfig(BaseModel):
    """Momentum SGD with L2 weight decay and a step schedule."""

    model_config = ConfigDict(extra="forbid", frozen=True)

    lr: float = Field(0.1, gt=0)
    momentum: float = Field(0.9, ge=0, lt=1)
    weight_decay: float = Field(2.0e-4, ge=0)
    milestones: Tuple[float, ...] = (0.5, 0.75)
    gamma: float = Field(0.1, gt=0)


class AblationFlags(BaseModel):
    model_config = ConfigDict(extra="forbid", frozen=True)

    masking: bool = False
    mixing: bool = False
    label_smoothing: bool = False

    def as_tuple(self) -> Tuple[bool, bool, bool]:
        return (self.masking, self.mixing, self.label_smoothing)


METHOD_FLAGS = {
    "pgd_at": AblationFlags(),
    "pgd_ls": AblationFlags(label_smoothing=True),
    "avmixup_g1": AblationFlags(mixing=True, label_smoothing=True),
    "m2at": AblationFlags(masking=True, mixing=True, label_smoothing=True),
}


class TrainConfig(BaseModel):
    """Everything a training run needs besides the data."""

    model_config = ConfigDict(extra="forbid", frozen=True)

    method: TrainMethod = "m2at"
    ablation: AblationFlags = AblationFlags()
    epochs: int = Field(200, ge=1)
    batch_size: int = Field(128, ge=1)
    optimizer: OptimizerConfig = OptimizerConfig()
    attack: AttackConfig = AttackConfig(random_start=True)
    beta_alpha: float = Field(1.0, gt=0)
    seed: int = 0
    augment: bool = True
    eval_rounds: int = Field(10, ge=1)
    select_rounds: int = Field(20, ge=1)
    eval_samples: Optional[int] = Field(None, ge=1)
    eval_batch_size: int = Field(256, ge=1)

    def flags(self) -> Optional[AblationFlags]:
        """Ablation flags the method resolves to; None for standard training."""
        if self.method == "standard":
            return None
        if self.method == "ablation":
            return self.ablation
        return METHOD_FLAGS[self.method]
