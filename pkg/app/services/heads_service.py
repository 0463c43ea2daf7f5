"""Training and loading of probes and pixel decoders on frozen tokenizer outputs."""
import logging
from dataclasses import dataclass
from pathlib import Path
from typing import List, Sequence, Tuple

import numpy as np
import torch
import torch.nn.functional as F
from tqdm import tqdm

from app.core.exceptions import ConfigurationError, NonFiniteLossError, ShapeMismatchError
from app.models.heads import LARS, PixelDecoder, ProbeHead, probe_predict, white_reset_patches
from app.repositories.checkpoint_repository import CheckpointRepository
from app.repositories.dataset_repository import DatasetRepository
from app.schemas.configs import DecoderConfig, OptimizerKind, ProbeConfig, ProbeProperty
from app.schemas.datasets import BallFrameLabel, FrameLabel, SHAPES, Task
from app.services.datagen_service import frame_to_class_map
from app.services.schedules import lr_at
from app.services.tokenizer_service import TokenizerService
from app.services.worldmodel_service import encode_frames


logger = logging.getLogger(__name__)


def label_class(label: FrameLabel, prop: ProbeProperty) -> int:
    if isinstance(label, BallFrameLabel):
        if prop != ProbeProperty.COLOR:
            raise ConfigurationError(f"Blinking-Ball frames have no '{prop.value}' probe target")
        return label.color_idx
    if prop == ProbeProperty.COLOR:
        return label.color_idx
    if prop == ProbeProperty.SHAPE:
        return SHAPES.index(label.shape)
    return label.position


def probe_labels(labels: Sequence[FrameLabel], prop: ProbeProperty) -> torch.Tensor:
    return torch.tensor([label_class(label, prop) for label in labels], dtype=torch.long)


def _build_probe_optimizer(head: ProbeHead, config: ProbeConfig) -> torch.optim.Optimizer:
    if config.optimizer == OptimizerKind.LARS:
        return LARS(head.parameters(), lr=config.lr, weight_decay=config.weight_decay,
                    momentum=config.momentum, trust_coefficient=config.trust_coefficient)
    logger.info("Training probe with momentum SGD instead of LARS")
    return torch.optim.SGD(head.parameters(), lr=config.lr, momentum=config.momentum,
                           weight_decay=config.weight_decay)


def probe_accuracy(head: ProbeHead, tokens: torch.Tensor, labels: torch.Tensor) -> float:
    return float((probe_predict(head, tokens) == labels).double().mean())


def train_prober(tokens: torch.Tensor, labels: torch.Tensor, config: ProbeConfig) -> Tuple[ProbeHead, float]:
    """Fit a linear probe on frozen tokens (N, T, D); returns the head and its training accuracy."""
    if tokens.shape[0] != labels.shape[0]:
        raise ShapeMismatchError(f"{tokens.shape[0]} token sets for {labels.shape[0]} labels")

    torch.manual_seed(config.seed)
    generator = torch.Generator().manual_seed(config.seed)
    head = ProbeHead(tokens.shape[-1], config.property.num_classes).to(tokens.dtype)
    optimizer = _build_probe_optimizer(head, config)

    for step in range(config.total_steps):
        lr = lr_at(step, config.total_steps, config.lr, 0.0)
        for group in optimizer.param_groups:
            group["lr"] = lr
        rows = torch.randint(0, tokens.shape[0], (config.batch_size,), generator=generator)
        loss = F.cross_entropy(head(tokens[rows]), labels[rows])
        if not torch.isfinite(loss):
            raise NonFiniteLossError(step)
        optimizer.zero_grad(set_to_none=True)
        loss.backward()
        optimizer.step()

    accuracy = probe_accuracy(head, tokens, labels)
    logger.info(f"{config.property.value} probe ({config.view.value} tokens): train accuracy {accuracy:.4f}")
    return head, accuracy


@dataclass
class LoadedProbe:
    head: ProbeHead
    config: ProbeConfig


@dataclass
class LoadedDecoder:
    decoder: PixelDecoder
    config: DecoderConfig
    patch_size: int


class HeadsService:
    """Service layer for probe and decoder heads."""

    def __init__(self):
        self.dataset_repository = DatasetRepository()
        self.checkpoint_repository = CheckpointRepository()
        self.tokenizer_service = TokenizerService()

    def _frames_and_labels(self, dataset_path: Path) -> Tuple[Task, np.ndarray, List[FrameLabel]]:
        dataset = self.dataset_repository.load(dataset_path)
        frames = dataset.stacked_frames()
        frames = frames.reshape(-1, *frames.shape[-3:])
        labels = [label for seq in dataset.sequences for label in seq.labels]
        return dataset.task, frames, labels

    def train_probe(self, tokenizer_path: Path, dataset_path: Path, config: ProbeConfig, out: Path) -> Path:
        tokenizer = self.tokenizer_service.load_tokenizer(tokenizer_path)
        _, frames, labels = self._frames_and_labels(dataset_path)
        tokens = encode_frames(tokenizer, frames, config.view).vectors
        head, accuracy = train_prober(tokens, probe_labels(labels, config.property), config)
        payload = {
            "kind": "probe",
            "config": config.model_dump(mode="json"),
            "tokenizer": str(tokenizer_path),
            "token_dim": int(tokens.shape[-1]),
            "state": head.state_dict(),
            "train_accuracy": accuracy,
        }
        return self.checkpoint_repository.save(payload, out)

    def load_probe(self, path: Path) -> LoadedProbe:
        payload = self.checkpoint_repository.load(path, kind="probe")
        config = ProbeConfig.model_validate(payload["config"])
        head = ProbeHead(payload["token_dim"], config.property.num_classes)
        head.to(next(iter(payload["state"].values())).dtype)
        head.load_state_dict(payload["state"])
        head.eval()
        return LoadedProbe(head=head, config=config)

    def train_decoder(self, tokenizer_path: Path, dataset_path: Path, config: DecoderConfig, out: Path) -> Path:
        tokenizer = self.tokenizer_service.load_tokenizer(tokenizer_path)
        task, frames, _ = self._frames_and_labels(dataset_path)
        if task != Task.BALLS:
            raise ConfigurationError("The pixel decoder is trained on Blinking-Ball frames only")

        dtype = next(tokenizer.model.parameters()).dtype
        patch_size = tokenizer.config.patch_size
        tokens = encode_frames(tokenizer, frames, config.view).vectors
        queries = white_reset_patches(frames, patch_size, dtype)
        targets = torch.from_numpy(frame_to_class_map(frames))

        torch.manual_seed(config.seed)
        generator = torch.Generator().manual_seed(config.seed)
        decoder = PixelDecoder(
            token_dim=tokens.shape[-1],
            image_size=frames.shape[1],
            patch_size=patch_size,
            width=config.width,
            depth=config.depth,
            num_heads=config.num_heads,
        ).to(dtype)
        optimizer = torch.optim.AdamW(decoder.parameters(), lr=config.base_lr, weight_decay=config.weight_decay)

        logger.info(f"Training pixel decoder on {frames.shape[0]} frames for {config.total_steps} steps")
        for step in tqdm(range(config.total_steps), disable=not config.progress, desc="decoder"):
            lr = lr_at(step, config.total_steps, config.base_lr, config.warmup_frac)
            for group in optimizer.param_groups:
                group["lr"] = lr
            rows = torch.randint(0, frames.shape[0], (config.batch_size,), generator=generator)
            loss = F.cross_entropy(decoder(queries[rows], tokens[rows]), targets[rows])
            if not torch.isfinite(loss):
                raise NonFiniteLossError(step)
            optimizer.zero_grad(set_to_none=True)
            loss.backward()
            optimizer.step()
            if (step + 1) % config.log_every == 0:
                logger.info(f"decoder step {step + 1}: loss={loss.item():.5f}")

        payload = {
            "kind": "decoder",
            "config": config.model_dump(mode="json"),
            "tokenizer": str(tokenizer_path),
            "token_dim": int(tokens.shape[-1]),
            "image_size": int(frames.shape[1]),
            "patch_size": patch_size,
            "state": decoder.state_dict(),
        }
        return self.checkpoint_repository.save(payload, out)

    def load_decoder(self, path: Path) -> LoadedDecoder:
        payload = self.checkpoint_repository.load(path, kind="decoder")
        config = DecoderConfig.model_validate(payload["config"])
        decoder = PixelDecoder(
            token_dim=payload["token_dim"],
            image_size=payload["image_size"],
            patch_size=payload["patch_size"],
            width=config.width,
            depth=config.depth,
            num_heads=config.num_heads,
        )
        decoder.to(payload["state"]["pos_embed"].dtype)
        decoder.load_state_dict(payload["state"])
        decoder.eval()
        return LoadedDecoder(decoder=decoder, config=config, patch_size=payload["patch_size"])
