import math
from enum import Enum
from typing import List

from pydantic import BaseModel, ConfigDict, Field, model_validator


class LossBreakdown(BaseModel):
    """Scalar loss terms of one training step; total = λ1·s2p + λ2·p2s + λ3·p2p + vq."""

    model_config = ConfigDict(frozen=True)

    l_s2p: float = Field(0.0, ge=0.0)
    l_p2s: float = Field(0.0, ge=0.0)
    l_p2p: float = Field(0.0, ge=0.0)
    l_vq: float = Field(0.0, ge=0.0)
    total: float
    lambda_s2p: float = 1.0
    lambda_p2s: float = 1.0
    lambda_p2p: float = 1.0


class CodebookStats(BaseModel):
    histogram: List[int]
    perplexity: float
    dead_codes: int


class TrainingMetricsRow(BaseModel):
    """One row of ``metrics.csv``; field order is the CSV column order."""

    step: int
    l_s2p: float
    l_p2s: float
    l_p2p: float
    l_vq: float
    total: float
    perplexity: float
    dead_codes: int
    lr: float
    momentum: float


class MetricCurve(BaseModel):
    """Per-step values of one metric for one method and seed."""

    method: str
    metric: str
    seed: int
    values: List[float]

    @model_validator(mode="after")
    def validate_values(self):
        if any(not math.isfinite(v) for v in self.values):
            raise ValueError(f"{self.method}/{self.metric} curve contains non-finite values")
        if self.metric.endswith("accuracy") and any(not 0.0 <= v <= 1.0 for v in self.values):
            raise ValueError(f"{self.method}/{self.metric} accuracy values must lie in [0, 1]")
        return self

    @property
    def horizon(self) -> int:
        return len(self.values)


class StageStatus(str, Enum):
    RUNNING = "running"
    COMPLETED = "completed"
    FAILED = "failed"
