from datetime import datetime
from pathlib import Path
from typing import Any, Dict, List, Optional

from pydantic import BaseModel, Field

from app.schemas.configs import DecoderConfig, EvaluationManifest, ProbeConfig, WorldModelConfig
from app.schemas.datasets import Task
from app.schemas.results import StageStatus


class DatasetRequest(BaseModel):
    task: Task
    count: int = Field(..., gt=0, description="Number of sequences")
    length: int = Field(..., gt=0, description="Frames per sequence")
    seed: int = 0
    out: Path


class DatasetResponse(BaseModel):
    path: Path
    task: Task
    count: int
    length: int


class TokenizerRequest(BaseModel):
    config: Dict[str, Any] = Field(default_factory=dict, description="TrainConfig fields")
    preset: Optional[str] = None
    resume: Optional[Path] = None


class WorldModelRequest(BaseModel):
    config: WorldModelConfig = Field(default_factory=WorldModelConfig)
    tokenizer: Path
    dataset: Path


class RolloutRequest(BaseModel):
    worldmodel: Path
    dataset: Path
    steps: int = Field(..., gt=0)
    out: Path
    num_sequences: Optional[int] = Field(None, gt=0)


class RolloutResponse(BaseModel):
    path: Path
    variant: str
    total_steps: int
    feedback_checks: int
    feedback_violations: int


class ProbeRequest(BaseModel):
    config: ProbeConfig = Field(default_factory=ProbeConfig)
    tokenizer: Path
    dataset: Path
    out: Path


class DecoderRequest(BaseModel):
    config: DecoderConfig = Field(default_factory=DecoderConfig)
    tokenizer: Path
    dataset: Path
    out: Path


class ArtifactResponse(BaseModel):
    path: Path


class EvaluationRequest(BaseModel):
    manifest: EvaluationManifest
    out: Path


class ExperimentRequest(BaseModel):
    manifest: Dict[str, Any] = Field(..., description="ExperimentManifest fields")


class StageRecordResponse(BaseModel):
    model_config = {"from_attributes": True}

    stage: str
    status: StageStatus
    artifact: Optional[str] = None
    fingerprint: str
    error: Optional[str] = None
    updated_at: datetime


class ExperimentResponse(BaseModel):
    name: str
    report: Optional[Path] = None
    stages: List[StageRecordResponse]


class HealthResponse(BaseModel):
    status: str
    timestamp: datetime
    database_connected: bool
