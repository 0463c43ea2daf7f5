from abc import ABC, abstractmethod
from typing import List, Optional

from sqlalchemy.ext.asyncio import AsyncSession

from app.database.database import StageRecord
from app.schemas.results import StageStatus


class StageRepositoryInterface(ABC):
    """Abstract interface for the pipeline stage registry."""

    @abstractmethod
    async def get(self, db: AsyncSession, experiment: str, stage: str) -> Optional[StageRecord]:
        pass

    @abstractmethod
    async def upsert(
        self,
        db: AsyncSession,
        experiment: str,
        stage: str,
        status: StageStatus,
        fingerprint: str,
        artifact: Optional[str] = None,
        error: Optional[str] = None,
    ) -> StageRecord:
        pass

    @abstractmethod
    async def list_for(self, db: AsyncSession, experiment: str) -> List[StageRecord]:
        pass
