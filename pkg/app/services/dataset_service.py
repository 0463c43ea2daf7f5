import logging
from pathlib import Path

from app.repositories.dataset_repository import DatasetRepository
from app.schemas.datasets import DatasetManifest, Task
from app.services.datagen_service import gen_dataset


logger = logging.getLogger(__name__)


class DatasetService:
    """Generates synthetic datasets and stores them on disk."""

    def __init__(self):
        self.repository = DatasetRepository()

    def generate(self, task: Task | str, count: int, length: int, seed: int, out: Path,
                 progress: bool = False) -> DatasetManifest:
        try:
            dataset = gen_dataset(task, count, length, seed, progress=progress)
            return self.repository.save(dataset, Path(out))
        except Exception as e:
            logger.error(f"Error generating dataset into {out}: {e}")
            raise

    def read_manifest(self, path: Path) -> DatasetManifest:
        return self.repository.read_manifest(Path(path))
