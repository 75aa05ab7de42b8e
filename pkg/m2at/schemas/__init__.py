"""Pydantic models for configurations and persisted records."""
from m2at.schemas.config import (
    PIXEL_SCALE,
    AblationFlags,
    AttackConfig,
    ModelConfig,
    OptimizerConfig,
    TrainConfig,
)
from m2at.schemas.records import EvalEntry, EvalReport, MetricsRecord, SweepPoint, TransferReport

__all__ = [
    "PIXEL_SCALE",
    "AblationFlags",
    "AttackConfig",
    "ModelConfig",
    "OptimizerConfig",
    "TrainConfig",
    "EvalEntry",
    "EvalReport",
    "MetricsRecord",
    "SweepPoint",
    "TransferReport",
]
