"""World-model training on frozen tokenizer outputs, token caching and rollouts."""
import hashlib
import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Dict, List, Optional, Tuple

import numpy as np
import torch
import torch.nn.functional as F
from tqdm import tqdm

from app.core.config import get_settings
from app.core.exceptions import ConfigurationError, NonFiniteLossError, ShapeMismatchError
from app.models.worldmodel import RolloutTrace, TokenWorldModel, rollout
from app.repositories.checkpoint_repository import CheckpointRepository
from app.repositories.dataset_repository import MANIFEST_NAME, DatasetRepository, file_digest
from app.schemas.configs import VARIANT_VIEWS, TokenView, WMVariant, WorldModelConfig, apply_task_horizons
from app.schemas.datasets import SyntheticDataset
from app.services.schedules import lr_at
from app.services.tokenizer_service import LoadedTokenizer, TokenizerService


logger = logging.getLogger(__name__)

WORLDMODEL_FILE = "worldmodel.pt"
ENCODE_BATCH = 256


@dataclass
class SequenceTokens:
    """Tokenized sequences: ``vectors`` is (S, T, tokens, dim); ``indices`` is (S, T, L) when discrete."""

    vectors: torch.Tensor
    indices: Optional[torch.Tensor] = None


@torch.no_grad()
def encode_frames(tokenizer: LoadedTokenizer, frames: np.ndarray, view: TokenView) -> SequenceTokens:
    """Tokenize (..., H, W, 3) uint8 frames; leading dims are kept."""
    lead = frames.shape[:-3]
    flat = frames.reshape(-1, *frames.shape[-3:])
    device = next(tokenizer.model.parameters()).device

    vectors, indices = [], []
    for start in range(0, flat.shape[0], ENCODE_BATCH):
        patches = tokenizer.patches(flat[start:start + ENCODE_BATCH]).to(device)
        encoded = tokenizer.model.encode(patches)
        vectors.append(encoded.view(view).cpu())
        if view == TokenView.SEMANTIC and encoded.indices is not None:
            indices.append(encoded.indices.cpu())

    stacked = torch.cat(vectors)
    return SequenceTokens(
        vectors=stacked.reshape(*lead, *stacked.shape[1:]),
        indices=torch.cat(indices).reshape(*lead, -1) if indices else None,
    )


class TokenCache:
    """On-disk cache of tokenized datasets keyed by tokenizer and manifest digests."""

    def __init__(self, cache_dir: Optional[Path] = None):
        self.cache_dir = Path(cache_dir or get_settings().cache_dir)
        self.repository = CheckpointRepository()

    @staticmethod
    def key(tokenizer_digest: str, manifest_digest: str, view: TokenView) -> str:
        return hashlib.sha256(f"{tokenizer_digest}:{manifest_digest}:{view.value}".encode()).hexdigest()

    def path(self, key: str) -> Path:
        return self.cache_dir / f"tokens_{key[:32]}.pt"

    def load(self, key: str) -> Optional[SequenceTokens]:
        path = self.path(key)
        if not path.is_file():
            return None
        payload = self.repository.load(path, kind="tokens")
        return SequenceTokens(vectors=payload["vectors"], indices=payload["indices"])

    def save(self, key: str, tokens: SequenceTokens) -> Path:
        return self.repository.save(
            {"kind": "tokens", "key": key, "vectors": tokens.vectors, "indices": tokens.indices}, self.path(key)
        )


def variant_io(variant: WMVariant, tokens: SequenceTokens) -> Tuple[torch.Tensor, torch.Tensor]:
    """(inputs, targets) per frame for teacher-forced training."""
    if variant.is_discrete:
        if tokens.indices is None:
            raise ShapeMismatchError(f"{variant.value} needs a tokenizer with a codebook")
        inputs = tokens.indices if variant == WMVariant.I2I else tokens.vectors
        return inputs, tokens.indices
    return tokens.vectors, tokens.vectors


def token_distance(predicted: torch.Tensor, truth: torch.Tensor) -> torch.Tensor:
    """Per-token L2 distance; shapes (..., D) -> (...)."""
    if predicted.shape != truth.shape:
        raise ShapeMismatchError(f"drift shapes differ: {tuple(predicted.shape)} vs {tuple(truth.shape)}")
    return (predicted - truth.to(predicted.dtype)).norm(dim=-1)


def drift_curve(predicted: torch.Tensor, truth: torch.Tensor) -> List[float]:
    """Per-step mean distance between rolled-out (B, steps, T, D) and re-encoded ground-truth tokens."""
    return token_distance(predicted, truth).mean(dim=(0, 2)).tolist()


@dataclass
class LoadedWorldModel:
    model: TokenWorldModel
    config: WorldModelConfig
    tokenizer: LoadedTokenizer

    @property
    def view(self) -> TokenView:
        return VARIANT_VIEWS[self.config.variant]

    @property
    def codes(self) -> Optional[torch.Tensor]:
        codebook = self.tokenizer.model.codebook
        return None if codebook is None else codebook.codes.detach()

    def window(self, tokens: SequenceTokens) -> torch.Tensor:
        inputs, _ = variant_io(self.config.variant, tokens)
        return inputs


class WorldModelService:
    """Service layer for world-model training and rollout."""

    def __init__(self):
        self.dataset_repository = DatasetRepository()
        self.checkpoint_repository = CheckpointRepository()
        self.tokenizer_service = TokenizerService()

    def tokens_for(self, tokenizer: LoadedTokenizer, dataset_path: Path, view: TokenView,
                   cache: Optional[TokenCache] = None) -> SequenceTokens:
        """Tokenize a stored dataset once, reusing the cache when possible."""
        cache = cache or TokenCache()
        key = TokenCache.key(tokenizer.digest, file_digest(Path(dataset_path) / MANIFEST_NAME), view)
        tokens = cache.load(key)
        if tokens is not None:
            logger.info(f"Token cache hit for {dataset_path} ({view.value})")
            return tokens

        logger.info(f"Token cache miss for {dataset_path} ({view.value}); encoding")
        dataset = self.dataset_repository.load(dataset_path)
        tokens = encode_frames(tokenizer, dataset.stacked_frames(), view)
        cache.save(key, tokens)
        return tokens

    def train_worldmodel(self, config: WorldModelConfig, tokenizer_path: Path, dataset_path: Path) -> Path:
        config = apply_task_horizons(config, self.dataset_repository.read_manifest(dataset_path).task)
        tokenizer = self.tokenizer_service.load_tokenizer(tokenizer_path)
        view = VARIANT_VIEWS[config.variant]
        inputs, targets = variant_io(config.variant, self.tokens_for(tokenizer, dataset_path, view))

        span = config.context_frames + config.predict_frames
        num_sequences, length = inputs.shape[:2]
        if length < span:
            raise ConfigurationError(f"Sequences of length {length} are shorter than H_c + H_p = {span}")

        torch.manual_seed(config.seed)
        rng = np.random.default_rng(config.seed)
        dims = self._dims(config, tokenizer, inputs)
        dtype = next(tokenizer.model.parameters()).dtype
        model = TokenWorldModel(**dims, **self._arch(config)).to(dtype=dtype)
        optimizer = torch.optim.AdamW(model.parameters(), lr=config.base_lr, weight_decay=config.weight_decay)
        if not config.variant.is_discrete or config.variant == WMVariant.R2I:
            inputs = inputs.to(dtype)
        if not config.variant.is_discrete:
            targets = targets.to(dtype)

        logger.info(
            f"Training {config.variant.value} world model on {num_sequences} sequences "
            f"for {config.total_steps} steps"
        )
        for step in tqdm(range(config.total_steps), disable=not config.progress, desc="worldmodel"):
            lr = lr_at(step, config.total_steps, config.base_lr, config.warmup_frac)
            for group in optimizer.param_groups:
                group["lr"] = lr

            window, target = self._sample_windows(inputs, targets, config, rng)
            loss = self._loss(model, window, target)
            if not torch.isfinite(loss):
                logger.error(f"Non-finite world-model loss at step {step}")
                raise NonFiniteLossError(step)

            optimizer.zero_grad(set_to_none=True)
            loss.backward()
            optimizer.step()
            if (step + 1) % config.log_every == 0:
                logger.info(f"step {step + 1}: loss={loss.item():.5f} lr={lr:.2e}")

        accuracy = self.teacher_forced_accuracy(model, inputs, targets, config, rng) \
            if config.variant.is_discrete else None
        if accuracy is not None:
            logger.info(f"Teacher-forced next-frame index accuracy: {accuracy:.4f}")

        payload = {
            "kind": "worldmodel",
            "config": config.model_dump(mode="json"),
            "tokenizer": str(tokenizer_path),
            "tokenizer_digest": tokenizer.digest,
            "dims": dims,
            "state": model.state_dict(),
            "teacher_forced_accuracy": accuracy,
        }
        return self.checkpoint_repository.save(payload, Path(config.output_dir) / WORLDMODEL_FILE)

    @staticmethod
    def _arch(config: WorldModelConfig) -> Dict[str, int]:
        return {
            "context_frames": config.context_frames,
            "predict_frames": config.predict_frames,
            "width": config.width,
            "depth": config.depth,
            "num_heads": config.num_heads,
        }

    @staticmethod
    def _dims(config: WorldModelConfig, tokenizer: LoadedTokenizer, inputs: torch.Tensor) -> Dict:
        codebook = tokenizer.model.codebook
        if config.variant.is_discrete and codebook is None:
            raise ShapeMismatchError(f"{config.variant.value} needs a tokenizer with a codebook")
        return {
            "variant": config.variant.value,
            "tokens_per_frame": int(inputs.shape[2]),
            "token_dim": int(inputs.shape[-1]) if inputs.dim() == 4 else tokenizer.config.slot_dim,
            "num_codes": codebook.num_codes if config.variant.is_discrete else None,
        }

    @staticmethod
    def _sample_windows(inputs: torch.Tensor, targets: torch.Tensor, config: WorldModelConfig,
                        rng: np.random.Generator) -> Tuple[torch.Tensor, torch.Tensor]:
        span = config.context_frames + config.predict_frames
        seq = torch.from_numpy(rng.integers(0, inputs.shape[0], size=config.batch_size))
        start = torch.from_numpy(rng.integers(0, inputs.shape[1] - span + 1, size=config.batch_size))
        times = start[:, None] + torch.arange(span)[None, :]
        window = inputs[seq[:, None], times[:, : config.context_frames]]
        target = targets[seq[:, None], times[:, config.context_frames:]]
        return window, target

    @staticmethod
    def _loss(model: TokenWorldModel, window: torch.Tensor, target: torch.Tensor) -> torch.Tensor:
        out = model(window)
        if model.variant.is_discrete:
            return F.cross_entropy(out.reshape(-1, out.shape[-1]), target.reshape(-1))
        return F.mse_loss(out, target)

    @torch.no_grad()
    def teacher_forced_accuracy(self, model: TokenWorldModel, inputs: torch.Tensor, targets: torch.Tensor,
                                config: WorldModelConfig, rng: np.random.Generator, batches: int = 8) -> float:
        correct = total = 0
        for _ in range(batches):
            window, target = self._sample_windows(inputs, targets, config, rng)
            predicted = model(window).argmax(dim=-1)
            correct += int((predicted == target).sum())
            total += target.numel()
        return correct / total

    def load_worldmodel(self, path: Path) -> LoadedWorldModel:
        payload = self.checkpoint_repository.load(path, kind="worldmodel")
        tokenizer = self.tokenizer_service.load_tokenizer(Path(payload["tokenizer"]))
        if tokenizer.digest != payload["tokenizer_digest"]:
            logger.warning(f"Tokenizer {payload['tokenizer']} changed since world model {path} was trained")
        config = WorldModelConfig.model_validate(payload["config"])
        model = TokenWorldModel(**payload["dims"], **self._arch(config))
        model.to(dtype=next(tokenizer.model.parameters()).dtype)
        model.load_state_dict(payload["state"])
        model.eval()
        return LoadedWorldModel(model=model, config=config, tokenizer=tokenizer)

    def rollout_frames(self, loaded: LoadedWorldModel, frames: np.ndarray, total_steps: int,
                       temperature: Optional[float] = None, seed: int = 0) -> RolloutTrace:
        """Roll out from conditioning frames (B, H_c, H, W, 3)."""
        if frames.shape[1] != loaded.model.context_frames:
            raise ShapeMismatchError(
                f"Expected {loaded.model.context_frames} conditioning frames, got {frames.shape[1]}"
            )
        tokens = encode_frames(loaded.tokenizer, frames, loaded.view)
        window = loaded.window(tokens)
        generator = torch.Generator().manual_seed(seed)
        return rollout(
            loaded.model,
            window,
            total_steps,
            codes=loaded.codes,
            temperature=loaded.config.temperature if temperature is None else temperature,
            generator=generator,
        )

    def rollout_dataset(self, model_path: Path, dataset_path: Path, total_steps: int, out: Path,
                        num_sequences: Optional[int] = None) -> RolloutTrace:
        loaded = self.load_worldmodel(model_path)
        dataset: SyntheticDataset = self.dataset_repository.load(dataset_path)
        frames = dataset.stacked_frames()[:num_sequences, : loaded.model.context_frames]
        trace = self.rollout_frames(loaded, frames, total_steps)
        self.save_trace(trace, out)
        return trace

    def save_trace(self, trace: RolloutTrace, path: Path) -> Path:
        return self.checkpoint_repository.save(trace.to_payload(), path)

    def load_trace(self, path: Path) -> RolloutTrace:
        return RolloutTrace.from_payload(self.checkpoint_repository.load(path, kind="trace"))
