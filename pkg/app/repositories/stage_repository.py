from typing import List, Optional

from sqlalchemy import select
from sqlalchemy.ext.asyncio import AsyncSession

from app.database.database import StageRecord
from app.repositories.stage_repository_interface import StageRepositoryInterface
from app.schemas.results import StageStatus


class StageRepository(StageRepositoryInterface):
    """Repository for pipeline stage records."""

    async def get(self, db: AsyncSession, experiment: str, stage: str) -> Optional[StageRecord]:
        result = await db.execute(
            select(StageRecord).where(StageRecord.experiment == experiment, StageRecord.stage == stage)
        )
        return result.scalar_one_or_none()

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
        record = await self.get(db, experiment, stage)
        if record is None:
            record = StageRecord(experiment=experiment, stage=stage)
            db.add(record)
        record.status = StageStatus(status).value
        record.fingerprint = fingerprint
        record.artifact = artifact
        record.error = error
        await db.commit()
        await db.refresh(record)
        return record

    async def list_for(self, db: AsyncSession, experiment: str) -> List[StageRecord]:
        result = await db.execute(
            select(StageRecord).where(StageRecord.experiment == experiment).order_by(StageRecord.id)
        )
        return list(result.scalars().all())
