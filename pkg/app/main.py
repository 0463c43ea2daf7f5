import logging
from contextlib import asynccontextmanager
from datetime import datetime

from fastapi import Depends, FastAPI, Request, status
from fastapi.middleware.cors import CORSMiddleware
from fastapi.responses import JSONResponse
from pydantic import ValidationError
from sqlalchemy import text
from sqlalchemy.ext.asyncio import AsyncSession

from app.controllers import dataset_controller, evaluation_controller, training_controller
from app.core.config import configure_logging, get_settings
from app.core.exceptions import (
    ArtifactError,
    CheckpointError,
    DatasetCorruptionError,
    DiscreteJepaError,
    ManifestError,
    NonFiniteLossError,
    StageFailedError,
)
from app.database.database import get_db, init_db
from app.schemas.api import HealthResponse


configure_logging()
logger = logging.getLogger(__name__)


@asynccontextmanager
async def lifespan(app: FastAPI):
    """Application lifespan manager for startup and shutdown events."""
    logger.info("Starting up the application...")
    try:
        await init_db()
        logger.info("Run registry initialized successfully")
    except Exception as e:
        logger.error(f"Failed to initialize run registry: {e}")
        raise e

    yield

    logger.info("Shutting down the application...")


app = FastAPI(
    title="Discrete-JEPA Desk API",
    description="Train semantic tokenizers, token world models and evaluation heads on synthetic sequence tasks",
    version="1.0.0",
    docs_url="/docs",
    redoc_url="/redoc",
    lifespan=lifespan,
)

app.add_middleware(
    CORSMiddleware,
    allow_origins=["*"],
    allow_credentials=True,
    allow_methods=["*"],
    allow_headers=["*"],
)

app.include_router(dataset_controller.router, prefix="/datasets", tags=["datasets"])
app.include_router(training_controller.router, tags=["training"])
app.include_router(evaluation_controller.router, tags=["evaluation"])


def _error(status_code: int, exc: Exception) -> JSONResponse:
    return JSONResponse(status_code=status_code, content={"detail": str(exc)})


@app.exception_handler(ValidationError)
async def validation_error_handler(request: Request, exc: ValidationError):
    return JSONResponse(status_code=status.HTTP_422_UNPROCESSABLE_ENTITY, content={"detail": exc.errors()})


@app.exception_handler(DiscreteJepaError)
async def domain_error_handler(request: Request, exc: DiscreteJepaError):
    logger.warning(f"Rejected {request.url.path}: {exc}")
    return _error(status.HTTP_422_UNPROCESSABLE_ENTITY, exc)


@app.exception_handler(ManifestError)
@app.exception_handler(CheckpointError)
async def missing_artifact_handler(request: Request, exc: ArtifactError):
    return _error(status.HTTP_404_NOT_FOUND, exc)


@app.exception_handler(DatasetCorruptionError)
async def corruption_handler(request: Request, exc: DatasetCorruptionError):
    logger.error(f"Corrupt dataset behind {request.url.path}: {exc}")
    return _error(status.HTTP_409_CONFLICT, exc)


@app.exception_handler(ArtifactError)
@app.exception_handler(NonFiniteLossError)
@app.exception_handler(StageFailedError)
async def failure_handler(request: Request, exc: DiscreteJepaError):
    logger.error(f"Internal failure on {request.url.path}: {exc}")
    return _error(status.HTTP_500_INTERNAL_SERVER_ERROR, exc)


@app.get("/", response_model=dict)
async def root():
    """Root endpoint with API information."""
    return {
        "message": "Discrete-JEPA Desk API",
        "version": "1.0.0",
        "docs_url": "/docs",
        "health_check": "/health",
        "endpoints": {
            "datasets": "/datasets - POST: Generate a synthetic dataset",
            "tokenizers": "/tokenizers - POST: Train a semantic tokenizer",
            "worldmodels": "/worldmodels - POST: Train a token world model",
            "rollouts": "/rollouts - POST: Roll out a world model",
            "probes": "/probes - POST: Train a linear probe",
            "decoders": "/decoders - POST: Train a pixel decoder",
            "evaluations": "/evaluations - POST: Evaluate long-horizon rollouts",
            "experiments": "/experiments - POST: Run a full pipeline; GET /experiments/{name}: stage records",
        },
    }


@app.get("/health", response_model=HealthResponse)
async def health_check(db: AsyncSession = Depends(get_db)):
    """Health check endpoint to verify API and run-registry connectivity."""
    try:
        await db.execute(text("SELECT 1"))
        database_connected = True
        logger.info("Health check passed - database connected")
    except Exception as e:
        database_connected = False
        logger.error(f"Health check failed - database error: {e}")

    return HealthResponse(
        status="healthy" if database_connected else "unhealthy",
        timestamp=datetime.utcnow(),
        database_connected=database_connected,
    )


if __name__ == "__main__":
    import uvicorn

    uvicorn.run("app.main:app", host="0.0.0.0", port=8000, log_level=get_settings().log_level.lower())
