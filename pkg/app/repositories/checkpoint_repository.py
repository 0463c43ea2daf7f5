import hashlib
import io
import logging
import os
import tempfile
from pathlib import Path
from typing import Any, Dict, Optional

import torch

from app.core.exceptions import ArtifactWriteError, CheckpointError
from app.repositories.checkpoint_repository_interface import CheckpointRepositoryInterface


logger = logging.getLogger(__name__)

CHECKPOINT_FORMAT_VERSION = 1


def atomic_write_bytes(path: Path, data: bytes) -> Path:
    """Write ``data`` to a temporary sibling and rename it over ``path``."""
    path = Path(path)
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        fd, tmp_name = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
        with os.fdopen(fd, "wb") as f:
            f.write(data)
        os.replace(tmp_name, path)
    except OSError as e:
        logger.error(f"Failed to write {path}: {e}")
        raise ArtifactWriteError(path, "Could not write artifact") from e
    return path


def serialize(payload: Dict[str, Any]) -> bytes:
    buffer = io.BytesIO()
    torch.save(payload, buffer)
    return buffer.getvalue()


class CheckpointRepository(CheckpointRepositoryInterface):
    """Checkpoints are ``torch.save`` archives of a plain dict.

    Every payload carries ``kind`` (tokenizer, worldmodel, probe, decoder, trace),
    ``format_version`` and ``config`` (the resolved config echo).
    """

    def save(self, payload: Dict[str, Any], path: Path) -> Path:
        if "kind" not in payload:
            raise ValueError("checkpoint payload needs a 'kind'")
        payload = {"format_version": CHECKPOINT_FORMAT_VERSION, **payload}
        atomic_write_bytes(path, serialize(payload))
        logger.info(f"Saved {payload['kind']} checkpoint to {path}")
        return Path(path)

    def load(self, path: Path, kind: Optional[str] = None) -> Dict[str, Any]:
        path = Path(path)
        if not path.is_file():
            raise CheckpointError(path, "Checkpoint not found")
        try:
            payload = torch.load(path, map_location="cpu", weights_only=True)
        except Exception as e:
            logger.error(f"Unreadable checkpoint {path}: {e}")
            raise CheckpointError(path, "Checkpoint is unreadable") from e

        if not isinstance(payload, dict) or "kind" not in payload:
            raise CheckpointError(path, "Checkpoint has no 'kind' entry")
        if payload.get("format_version") != CHECKPOINT_FORMAT_VERSION:
            raise CheckpointError(path, f"Unsupported checkpoint format {payload.get('format_version')}")
        if kind is not None and payload["kind"] != kind:
            raise CheckpointError(path, f"Expected a {kind} checkpoint, found {payload['kind']}")
        return payload

    def digest(self, path: Path) -> str:
        path = Path(path)
        if not path.is_file():
            raise CheckpointError(path, "Checkpoint not found")
        return hashlib.sha256(path.read_bytes()).hexdigest()
