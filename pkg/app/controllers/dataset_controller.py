import asyncio
import logging

from fastapi import APIRouter

from app.schemas.api import DatasetRequest, DatasetResponse
from app.services.dataset_service import DatasetService


logger = logging.getLogger(__name__)
router = APIRouter()


class DatasetController:
    """Controller for synthetic dataset generation."""

    def __init__(self):
        self.service = DatasetService()


dataset_controller = DatasetController()


@router.post("", response_model=DatasetResponse)
async def generate_dataset(request: DatasetRequest):
    """Generate a Dancing-Sprites or Blinking-Ball dataset into ``request.out``."""
    manifest = await asyncio.to_thread(
        dataset_controller.service.generate,
        request.task,
        request.count,
        request.length,
        request.seed,
        request.out,
    )
    logger.info(f"Generated {manifest.count} {manifest.task.value} sequences at {request.out}")
    return DatasetResponse(path=request.out, task=manifest.task, count=manifest.count, length=manifest.length)
