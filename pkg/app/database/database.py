from datetime import datetime

from sqlalchemy import Column, DateTime, Integer, String, Text, UniqueConstraint
from sqlalchemy.ext.asyncio import AsyncSession, async_sessionmaker, create_async_engine
from sqlalchemy.orm import declarative_base

from app.core.config import get_settings


def async_database_url(url: str) -> str:
    """Rewrite sync URLs to their async drivers."""
    # Handle both postgres:// and postgresql:// prefixes from cloud providers
    if url.startswith("postgres://"):
        url = url.replace("postgres://", "postgresql+asyncpg://", 1)
    elif url.startswith("postgresql://"):
        url = url.replace("postgresql://", "postgresql+asyncpg://", 1)
    elif url.startswith("sqlite://"):
        url = url.replace("sqlite://", "sqlite+aiosqlite://", 1)

    # asyncpg spells sslmode=require as ssl=require
    if "sslmode=require" in url:
        url = url.replace("sslmode=require", "ssl=require")
    return url


ASYNC_DATABASE_URL = async_database_url(get_settings().database_url)


def _engine_kwargs(url: str) -> dict:
    if url.startswith("sqlite"):
        return {"echo": False}
    return {"pool_size": 10, "max_overflow": 20, "pool_pre_ping": True, "echo": False}


engine = create_async_engine(ASYNC_DATABASE_URL, **_engine_kwargs(ASYNC_DATABASE_URL))

SessionLocal = async_sessionmaker(
    engine,
    class_=AsyncSession,
    autocommit=False,
    autoflush=False,
    expire_on_commit=False,
)

Base = declarative_base()


class StageRecord(Base):
    """One pipeline stage of one experiment."""

    __tablename__ = "stage_records"

    id = Column(Integer, primary_key=True, index=True, autoincrement=True)
    experiment = Column(String(200), nullable=False, index=True)
    stage = Column(String(200), nullable=False)
    status = Column(String(20), nullable=False)
    artifact = Column(Text, nullable=True)
    fingerprint = Column(String(64), nullable=False)
    error = Column(Text, nullable=True)
    updated_at = Column(DateTime, default=datetime.utcnow, onupdate=datetime.utcnow, nullable=False)

    __table_args__ = (
        UniqueConstraint("experiment", "stage", name="uq_stage_records_experiment_stage"),
    )


async def get_db():
    """Dependency to get async database session."""
    async with SessionLocal() as session:
        try:
            yield session
        finally:
            await session.close()


async def create_tables():
    """Create all tables in the database."""
    async with engine.begin() as conn:
        await conn.run_sync(Base.metadata.create_all)


async def init_db():
    """Initialize the run registry."""
    await create_tables()
