import asyncio
import logging

from fastapi import APIRouter

from app.schemas.api import (
    ArtifactResponse,
    DecoderRequest,
    ProbeRequest,
    RolloutRequest,
    RolloutResponse,
    TokenizerRequest,
    WorldModelRequest,
)
from app.schemas.configs import build_train_config
from app.services.heads_service import HeadsService
from app.services.tokenizer_service import TokenizerService
from app.services.worldmodel_service import WorldModelService


logger = logging.getLogger(__name__)
router = APIRouter()


class TrainingController:
    """Controller for tokenizer, world-model and head training plus rollouts."""

    def __init__(self):
        self.tokenizer_service = TokenizerService()
        self.worldmodel_service = WorldModelService()
        self.heads_service = HeadsService()


training_controller = TrainingController()


@router.post("/tokenizers", response_model=ArtifactResponse)
async def train_tokenizer(request: TokenizerRequest):
    config = build_train_config(request.config, preset=request.preset)
    path = await asyncio.to_thread(training_controller.tokenizer_service.train_tokenizer, config, request.resume)
    return ArtifactResponse(path=path)


@router.post("/worldmodels", response_model=ArtifactResponse)
async def train_worldmodel(request: WorldModelRequest):
    path = await asyncio.to_thread(
        training_controller.worldmodel_service.train_worldmodel,
        request.config,
        request.tokenizer,
        request.dataset,
    )
    return ArtifactResponse(path=path)


@router.post("/rollouts", response_model=RolloutResponse)
async def rollout(request: RolloutRequest):
    trace = await asyncio.to_thread(
        training_controller.worldmodel_service.rollout_dataset,
        request.worldmodel,
        request.dataset,
        request.steps,
        request.out,
        request.num_sequences,
    )
    return RolloutResponse(
        path=request.out,
        variant=trace.variant.value,
        total_steps=trace.total_steps,
        feedback_checks=trace.feedback_checks,
        feedback_violations=trace.feedback_violations,
    )


@router.post("/probes", response_model=ArtifactResponse)
async def train_probe(request: ProbeRequest):
    path = await asyncio.to_thread(
        training_controller.heads_service.train_probe,
        request.tokenizer,
        request.dataset,
        request.config,
        request.out,
    )
    return ArtifactResponse(path=path)


@router.post("/decoders", response_model=ArtifactResponse)
async def train_decoder(request: DecoderRequest):
    path = await asyncio.to_thread(
        training_controller.heads_service.train_decoder,
        request.tokenizer,
        request.dataset,
        request.config,
        request.out,
    )
    return ArtifactResponse(path=path)
