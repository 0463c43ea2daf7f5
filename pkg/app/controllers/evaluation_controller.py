import asyncio
import logging

from fastapi import APIRouter, Depends, HTTPException, status
from sqlalchemy.ext.asyncio import AsyncSession

from app.database.database import get_db
from app.schemas.api import (
    ArtifactResponse,
    EvaluationRequest,
    ExperimentRequest,
    ExperimentResponse,
    StageRecordResponse,
)
from app.schemas.configs import ExperimentManifest
from app.services.evaluation_service import EvaluationService
from app.services.experiment_service import ExperimentService


logger = logging.getLogger(__name__)
router = APIRouter()


class EvaluationController:
    """Controller for evaluation reports and full experiments."""

    def __init__(self):
        self.evaluation_service = EvaluationService()
        self.experiment_service = ExperimentService()


evaluation_controller = EvaluationController()


@router.post("/evaluations", response_model=ArtifactResponse)
async def evaluate(request: EvaluationRequest):
    """Run rollouts for every method and write curves, summary, plots and flags."""
    path = await asyncio.to_thread(
        evaluation_controller.evaluation_service.evaluate,
        request.manifest,
        request.out,
        {"source": "api"},
    )
    return ArtifactResponse(path=path)


@router.post("/experiments", response_model=ExperimentResponse)
async def run_experiment(request: ExperimentRequest, db: AsyncSession = Depends(get_db)):
    manifest = ExperimentManifest.model_validate(request.manifest)
    service = evaluation_controller.experiment_service
    report = await service.run_experiment(manifest, db)
    records = await service.list_stages(db, manifest.name)
    return ExperimentResponse(
        name=manifest.name,
        report=report,
        stages=[StageRecordResponse.model_validate(record) for record in records],
    )


@router.get("/experiments/{name}", response_model=ExperimentResponse)
async def get_experiment(name: str, db: AsyncSession = Depends(get_db)):
    records = await evaluation_controller.experiment_service.list_stages(db, name)
    if not records:
        raise HTTPException(status_code=status.HTTP_404_NOT_FOUND, detail=f"No stages recorded for experiment '{name}'")
    return ExperimentResponse(
        name=name,
        stages=[StageRecordResponse.model_validate(record) for record in records],
    )
