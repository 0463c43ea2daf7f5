import hashlib
import logging
from pathlib import Path
from typing import List

import numpy as np
from pydantic import ValidationError

from app.core.exceptions import DatasetCorruptionError, ManifestError
from app.repositories.dataset_repository_interface import DatasetRepositoryInterface
from app.schemas.datasets import (
    BallFrameLabel,
    BlinkingBallSpec,
    DatasetManifest,
    FrameLabel,
    ImageSequence,
    SequenceRecord,
    SpriteFrameLabel,
    SyntheticDataset,
    Task,
)
from app.services.datagen_service import IMAGE_SIZE, palette_for


logger = logging.getLogger(__name__)

MANIFEST_NAME = "manifest.json"
FRAMES_DIR = "frames"


def file_digest(path: Path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


class DatasetRepository(DatasetRepositoryInterface):
    """Stores a dataset as ``manifest.json`` plus one lossless ``.npy`` per sequence.

    Layout::

        <root>/manifest.json          task, seed, counts, palette, stats, per-sequence records
        <root>/frames/seq_00000.npy   uint8 array (T, 64, 64, 3)
    """

    def save(self, dataset: SyntheticDataset, path: Path) -> DatasetManifest:
        root = Path(path)
        (root / FRAMES_DIR).mkdir(parents=True, exist_ok=True)

        records: List[SequenceRecord] = []
        for index, sequence in enumerate(dataset.sequences):
            relative = f"{FRAMES_DIR}/seq_{index:05d}.npy"
            np.save(root / relative, np.ascontiguousarray(sequence.frames), allow_pickle=False)
            records.append(self._record(index, relative, root / relative, sequence))

        manifest = DatasetManifest(
            task=dataset.task,
            seed=dataset.seed,
            count=len(dataset.sequences),
            length=dataset.length,
            image_size=IMAGE_SIZE,
            palette=palette_for(dataset.task),
            stats=dataset.stats,
            sequences=records,
        )
        (root / MANIFEST_NAME).write_text(manifest.model_dump_json(indent=2))
        logger.info(f"Saved {manifest.count} sequences to {root}")
        return manifest

    def read_manifest(self, path: Path) -> DatasetManifest:
        manifest_path = Path(path) / MANIFEST_NAME
        if not manifest_path.is_file():
            raise ManifestError(manifest_path, "Dataset manifest not found")
        try:
            return DatasetManifest.model_validate_json(manifest_path.read_text())
        except ValidationError as e:
            logger.error(f"Invalid dataset manifest {manifest_path}: {e}")
            raise ManifestError(manifest_path, "Dataset manifest is corrupt") from e

    def load(self, path: Path) -> SyntheticDataset:
        root = Path(path)
        manifest = self.read_manifest(root)

        sequences = []
        for record in manifest.sequences:
            frames = self._load_frames(root / record.file, record)
            sequences.append(ImageSequence(
                frames=frames,
                labels=self._labels(manifest.task, record),
                pattern=record.pattern,
                seed=record.seed,
            ))

        logger.info(f"Loaded {len(sequences)} sequences from {root}")
        return SyntheticDataset(
            task=manifest.task,
            seed=manifest.seed,
            length=manifest.length,
            sequences=sequences,
            stats=manifest.stats,
        )

    def _record(self, index: int, relative: str, file_path: Path, sequence: ImageSequence) -> SequenceRecord:
        first = sequence.labels[0]
        if isinstance(sequence.pattern, BlinkingBallSpec):
            return SequenceRecord(
                index=index,
                file=relative,
                sha256=file_digest(file_path),
                length=sequence.length,
                seed=sequence.seed,
                pattern=sequence.pattern,
                colors=[label.color_idx for label in sequence.labels],
                active_balls=[label.active_ball for label in sequence.labels],
            )
        return SequenceRecord(
            index=index,
            file=relative,
            sha256=file_digest(file_path),
            length=sequence.length,
            seed=sequence.seed,
            pattern=sequence.pattern,
            shape=first.shape,
            position=first.position,
            colors=[label.color_idx for label in sequence.labels],
        )

    def _labels(self, task: Task, record: SequenceRecord) -> List[FrameLabel]:
        if task == Task.BALLS:
            return [
                BallFrameLabel(active_ball=ball, color_idx=color)
                for ball, color in zip(record.active_balls or [], record.colors)
            ]
        return [
            SpriteFrameLabel(color_idx=color, shape=record.shape, position=record.position)
            for color in record.colors
        ]

    def _load_frames(self, file_path: Path, record: SequenceRecord) -> np.ndarray:
        if not file_path.is_file():
            raise DatasetCorruptionError(file_path, "Frame file missing")
        if file_digest(file_path) != record.sha256:
            raise DatasetCorruptionError(file_path, "Frame file checksum mismatch")
        try:
            frames = np.load(file_path, allow_pickle=False)
        except (ValueError, OSError) as e:
            raise DatasetCorruptionError(file_path, "Frame file unreadable") from e

        expected = (record.length, IMAGE_SIZE, IMAGE_SIZE, 3)
        if frames.shape != expected or frames.dtype != np.uint8:
            raise DatasetCorruptionError(
                file_path, f"Frame array has shape {frames.shape} / {frames.dtype}, expected {expected} uint8"
            )
        return frames
