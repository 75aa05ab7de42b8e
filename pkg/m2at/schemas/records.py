"""Persisted records: metrics events and evaluation reports."""
from __future__ import annotations

from typing import Dict, List, Literal, Optional

from pydantic import BaseModel, ConfigDict, computed_field


class MetricsRecord(BaseModel):
    """One training/evaluation event; serialized as one JSON object per line."""

    model_config = ConfigDict(extra="forbid", frozen=True)

    timestamp: str
    run_id: str
    phase: Literal["train", "eval"]
    epoch: Optional[int] = None
    metric: str
    value: float
    attack: Optional[str] = None
    seed: int = 0


class EvalEntry(BaseModel):
    """Accuracy under one attack, with exact integer counts."""

    model_config = ConfigDict(extra="ignore", frozen=True)

    attack: str
    epsilon: float = 0.0
    step_size: float = 0.0
    rounds: int = 0
    correct: int
    total: int

    @computed_field  # type: ignore[prop-decorator]
    @property
    def accuracy(self) -> float:
        return self.correct / self.total if self.total else 0.0


class EvalReport(BaseModel):
    model_config = ConfigDict(extra="forbid")

    model_id: str
    seed: int
    n_samples: int
    entries: List[EvalEntry]

    def accuracy(self, attack: str) -> float:
        for entry in self.entries:
            if entry.attack == attack:
                return entry.accuracy
        raise KeyError(f"no entry for attack {attack!r}")


class SweepPoint(BaseModel):
    """One cell of an epsilon sweep; budgets in 1/255 units."""

    model_config = ConfigDict(extra="forbid", frozen=True)

    series: str
    epsilon: float
    alpha: float
    attack: str
    accuracy: float


class TransferReport(BaseModel):
    """accuracy[defender][attacker]; the diagonal is the white-box number."""

    model_config = ConfigDict(extra="forbid")

    models: List[str]
    attack: str
    n_samples: int
    correct: Dict[str, Dict[str, int]]
    accuracy: Dict[str, Dict[str, float]]
    white_box: Dict[str, float]

    def black_box(self, defender: str) -> Dict[str, float]:
        return {a: acc for a, acc in self.accuracy[defender].items() if a != defender}


class CurvePoint(BaseModel):
    """Held-out accuracy of one run under one attack after one epoch."""

    model_config = ConfigDict(extra="forbid", frozen=True)

    series: str
    epoch: int
    attack: str
    accuracy: float
