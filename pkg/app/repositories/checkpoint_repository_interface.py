from abc import ABC, abstractmethod
from pathlib import Path
from typing import Any, Dict, Optional


class CheckpointRepositoryInterface(ABC):
    """Abstract interface for checkpoint storage."""

    @abstractmethod
    def save(self, payload: Dict[str, Any], path: Path) -> Path:
        pass

    @abstractmethod
    def load(self, path: Path, kind: Optional[str] = None) -> Dict[str, Any]:
        pass

    @abstractmethod
    def digest(self, path: Path) -> str:
        pass
