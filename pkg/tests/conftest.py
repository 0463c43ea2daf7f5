from pathlib import Path
from typing import AsyncGenerator

import pytest
import pytest_asyncio
from httpx import ASGITransport, AsyncClient
from sqlalchemy.ext.asyncio import AsyncSession, async_sessionmaker, create_async_engine
from sqlalchemy.pool import StaticPool

from app.core.config import get_settings
from app.database.database import Base, get_db
from app.main import app
from app.schemas.configs import TrainConfig
from app.schemas.datasets import Task
from app.services.dataset_service import DatasetService


# In-memory SQLite run registry shared by every connection of the test engine
TEST_DATABASE_URL = "sqlite+aiosqlite:///:memory:"


@pytest_asyncio.fixture
async def test_engine():
    engine = create_async_engine(TEST_DATABASE_URL, connect_args={"check_same_thread": False}, poolclass=StaticPool)
    async with engine.begin() as conn:
        await conn.run_sync(Base.metadata.create_all)
    yield engine
    await engine.dispose()


@pytest_asyncio.fixture
async def async_db_session(test_engine) -> AsyncGenerator[AsyncSession, None]:
    """Create an async database session for testing."""
    session_factory = async_sessionmaker(test_engine, class_=AsyncSession, expire_on_commit=False)
    async with session_factory() as session:
        yield session


@pytest_asyncio.fixture
async def async_client(test_engine) -> AsyncGenerator[AsyncClient, None]:
    """Create an async HTTP client bound to the test registry."""
    session_factory = async_sessionmaker(test_engine, class_=AsyncSession, expire_on_commit=False)

    async def override_get_db() -> AsyncGenerator[AsyncSession, None]:
        async with session_factory() as session:
            yield session

    app.dependency_overrides[get_db] = override_get_db
    transport = ASGITransport(app=app)
    async with AsyncClient(transport=transport, base_url="http://test") as client:
        yield client
    app.dependency_overrides.clear()


@pytest.fixture(autouse=True)
def isolated_cache(tmp_path, monkeypatch):
    """Point the token cache at a per-test directory."""
    monkeypatch.setenv("DJEPA_CACHE_DIR", str(tmp_path / "cache"))
    get_settings.cache_clear()
    yield tmp_path / "cache"
    get_settings.cache_clear()


def tiny_train_config(dataset_path: Path, output_dir: Path, task: Task = Task.SPRITES, **overrides) -> TrainConfig:
    """A tokenizer small enough to train for a few steps on CPU."""
    values = dict(
        task=task,
        dataset_path=dataset_path,
        output_dir=output_dir,
        patch_size=16,
        width=32,
        depth=1,
        num_heads=2,
        num_slots=2,
        slot_dim=16,
        codebook_size=16,
        predictor_width=32,
        predictor_depth=1,
        predictor_heads=2,
        batch_size=4,
        total_steps=6,
        log_every=2,
        checkpoint_every=3,
        reinit_every=3,
        seed=0,
    )
    values.update(overrides)
    return TrainConfig.model_validate(values)


@pytest.fixture
def sprites_dataset(tmp_path) -> Path:
    out = tmp_path / "sprites"
    DatasetService().generate(Task.SPRITES, count=4, length=10, seed=3, out=out)
    return out


@pytest.fixture
def balls_dataset(tmp_path) -> Path:
    out = tmp_path / "balls"
    DatasetService().generate(Task.BALLS, count=4, length=10, seed=5, out=out)
    return out


@pytest.fixture
def tiny_config():
    return tiny_train_config


@pytest.fixture(scope="session")
def trained_sprites(tmp_path_factory):
    """Tiny sprites dataset plus a D-JEPA and an I-JEPA tokenizer trained on it."""
    from app.services.tokenizer_service import TokenizerService

    root = tmp_path_factory.mktemp("trained_sprites")
    DatasetService().generate(Task.SPRITES, count=6, length=12, seed=21, out=root / "train")
    DatasetService().generate(Task.SPRITES, count=3, length=12, seed=22, out=root / "test")
    service = TokenizerService()
    djepa = service.train_tokenizer(tiny_train_config(root / "train", root / "djepa", total_steps=4))
    ijepa = service.train_ijepa_baseline(tiny_train_config(root / "train", root / "ijepa", total_steps=4))
    return {"root": root, "train": root / "train", "test": root / "test", "djepa": djepa, "ijepa": ijepa}


@pytest.fixture(scope="session")
def trained_balls(tmp_path_factory):
    from app.services.tokenizer_service import TokenizerService

    root = tmp_path_factory.mktemp("trained_balls")
    DatasetService().generate(Task.BALLS, count=6, length=12, seed=31, out=root / "train")
    DatasetService().generate(Task.BALLS, count=3, length=12, seed=32, out=root / "test")
    djepa = TokenizerService().train_tokenizer(
        tiny_train_config(root / "train", root / "djepa", task=Task.BALLS, total_steps=4)
    )
    return {"root": root, "train": root / "train", "test": root / "test", "djepa": djepa}
