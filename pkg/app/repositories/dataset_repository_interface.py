from abc import ABC, abstractmethod
from pathlib import Path

from app.schemas.datasets import DatasetManifest, SyntheticDataset


class DatasetRepositoryInterface(ABC):
    """Abstract interface for dataset storage."""

    @abstractmethod
    def save(self, dataset: SyntheticDataset, path: Path) -> DatasetManifest:
        pass

    @abstractmethod
    def load(self, path: Path) -> SyntheticDataset:
        pass

    @abstractmethod
    def read_manifest(self, path: Path) -> DatasetManifest:
        pass
