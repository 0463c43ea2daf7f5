"""Tokenizer training loop, checkpointing and resume."""
import json
import logging
from collections import deque
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Deque, Dict, Optional

import numpy as np
import torch
from tqdm import tqdm

from app.core.config import get_settings
from app.core.exceptions import ConfigurationError, NonFiniteLossError
from app.models.backbone import ema_update, encode_target, frames_to_patches, sample_mask
from app.models.quantizer import codebook_stats, ema_codebook_update, reinit_dead_codes, track_code_usage
from app.models.tokenizer import DiscreteJepa, TokenizerStep
from app.repositories.checkpoint_repository import CheckpointRepository, atomic_write_bytes
from app.repositories.dataset_repository import DatasetRepository
from app.repositories.metrics_repository import MetricsRepository
from app.schemas.configs import CodebookMode, TrainConfig, apply_preset
from app.schemas.datasets import ChannelStats, SyntheticDataset
from app.schemas.results import LossBreakdown, TrainingMetricsRow
from app.services.schedules import lr_at, momentum_at, vq_weight_at


logger = logging.getLogger(__name__)

# Number of recent batches whose code assignments feed the usage statistics.
USAGE_WINDOW = 20
TOKENIZER_FILE = "tokenizer.pt"
METRICS_FILE = "metrics.csv"
LAST_GOOD_FILE = "last_good.pt"


def torch_dtype(name: str) -> torch.dtype:
    return torch.float64 if name == "float64" else torch.float32


def model_sections(model: torch.nn.Module) -> Dict[str, Dict[str, torch.Tensor]]:
    """Split a state dict by top-level submodule (context_encoder, codebook, s2p, ...)."""
    sections: Dict[str, Dict[str, torch.Tensor]] = {}
    for key, value in model.state_dict().items():
        head, _, rest = key.partition(".")
        sections.setdefault(head, {})[rest] = value
    return sections


def load_sections(model: torch.nn.Module, sections: Dict[str, Dict[str, torch.Tensor]]) -> None:
    state = {f"{head}.{key}": value for head, part in sections.items() for key, value in part.items()}
    model.load_state_dict(state, strict=True)


def dataset_patches(dataset: SyntheticDataset, config: TrainConfig) -> torch.Tensor:
    """Every frame of the dataset as normalized patches, shape (frames, N_p, patch_dim)."""
    frames = dataset.stacked_frames()
    frames = frames.reshape(-1, *frames.shape[-3:])
    return frames_to_patches(frames, dataset.stats.mean, dataset.stats.std, config.patch_size,
                             torch_dtype(config.dtype))


@dataclass
class StepResult:
    step: int
    losses: LossBreakdown
    lr: float
    momentum: float
    perplexity: float
    dead_codes: int

    def metrics_row(self) -> TrainingMetricsRow:
        return TrainingMetricsRow(
            step=self.step,
            l_s2p=self.losses.l_s2p,
            l_p2s=self.losses.l_p2s,
            l_p2p=self.losses.l_p2p,
            l_vq=self.losses.l_vq,
            total=self.losses.total,
            perplexity=self.perplexity,
            dead_codes=self.dead_codes,
            lr=self.lr,
            momentum=self.momentum,
        )


@dataclass
class LoadedTokenizer:
    model: DiscreteJepa
    config: TrainConfig
    stats: ChannelStats
    digest: str

    def patches(self, frames: np.ndarray) -> torch.Tensor:
        dtype = next(self.model.parameters()).dtype
        return frames_to_patches(frames, self.stats.mean, self.stats.std, self.config.patch_size, dtype)


class TokenizerTrainer:
    """Owns the model, optimizer and RNG state of one tokenizer training run."""

    def __init__(self, config: TrainConfig, patches: torch.Tensor, stats: ChannelStats, device: str = "cpu"):
        self.config = config
        self.stats = stats
        dtype = torch_dtype(config.dtype)

        torch.manual_seed(config.seed)
        self.rng = np.random.default_rng(config.seed)
        self.model = DiscreteJepa(config).to(device=device, dtype=dtype)
        self.patches = patches.to(device=device, dtype=dtype)
        self.optimizer = self._build_optimizer()
        self.step = 0
        self.usage: Deque[torch.Tensor] = deque(maxlen=USAGE_WINDOW)

    def _build_optimizer(self) -> torch.optim.Optimizer:
        codebook = self.model.codebook
        codes = codebook.codes if codebook is not None else None
        params = [p for p in self.model.parameters() if p.requires_grad and p is not codes]
        groups = [{"params": params, "name": "main", "weight_decay": self.config.weight_decay}]
        if codes is not None and codes.requires_grad:
            groups.append({"params": [codes], "name": "codebook", "weight_decay": 0.0})
        return torch.optim.AdamW(groups, lr=self.config.base_lr)

    def _set_lr(self) -> float:
        c = self.config
        lr = lr_at(self.step, c.total_steps, c.base_lr, c.warmup_frac)
        for group in self.optimizer.param_groups:
            if group["name"] == "codebook":
                group["lr"] = lr_at(self.step, c.total_steps, c.vq_lr, c.vq_warmup_frac)
            else:
                group["lr"] = lr
        return lr

    def sample_batch(self) -> torch.Tensor:
        rows = self.rng.integers(0, self.patches.shape[0], size=self.config.batch_size)
        return self.patches[torch.from_numpy(rows).to(self.patches.device)]

    def training_step(self, batch: Optional[torch.Tensor] = None) -> StepResult:
        """One AdamW step, then the target-encoder EMA, codebook EMA and periodic dead-code reinit."""
        c = self.config
        if batch is None:
            batch = self.sample_batch()
        mask = sample_mask(c.num_patches, (c.mask_ratio_min, c.mask_ratio_max), self.rng)
        lr = self._set_lr()

        codebook = self.model.codebook
        if codebook is not None and not bool(codebook.initialized):
            codebook.init_from(encode_target(self.model.target_encoder, batch).z_s, self.rng)

        vq_weight = vq_weight_at(self.step, c.total_steps, c.vq_warmup_frac)
        out = self.model.forward_losses(batch, mask, vq_weight=vq_weight)
        if not torch.isfinite(out.losses.total):
            self._abort(out, lr)

        self.optimizer.zero_grad(set_to_none=True)
        out.losses.total.backward()
        self.optimizer.step()

        momentum = momentum_at(self.step, c.total_steps, c.momentum_start, c.momentum_end, c.momentum_schedule)
        ema_update(self.model.target_encoder, self.model.context_encoder, momentum)

        perplexity, dead = 0.0, 0
        if codebook is not None:
            if codebook.mode == CodebookMode.EMA:
                ema_codebook_update(codebook, out.target_z_s, out.target_indices)
            else:
                track_code_usage(codebook, out.target_indices)
            self.usage.append(out.target_indices.detach().cpu().reshape(-1))
            stats = codebook_stats(torch.cat(list(self.usage)), codebook.num_codes)
            perplexity, dead = stats.perplexity, stats.dead_codes

        self.step += 1
        if codebook is not None and c.reinit_every and self.step % c.reinit_every == 0:
            reinit_dead_codes(codebook, out.target_z_s, c.dead_code_threshold, self.rng)

        return StepResult(
            step=self.step,
            losses=out.losses.breakdown(),
            lr=lr,
            momentum=momentum,
            perplexity=perplexity,
            dead_codes=dead,
        )

    def _abort(self, out: TokenizerStep, lr: float) -> None:
        output_dir = Path(self.config.output_dir)
        CheckpointRepository().save(self.checkpoint_payload(), output_dir / LAST_GOOD_FILE)

        losses = out.losses
        diagnostics = {
            "step": self.step,
            "lr": lr,
            "losses": {
                name: float(getattr(losses, name).detach())
                for name in ("l_s2p", "l_p2s", "l_p2p", "l_vq", "total")
            },
            "non_finite_parameters": [
                name for name, p in self.model.named_parameters() if not torch.isfinite(p).all()
            ],
            "last_good_checkpoint": str(output_dir / LAST_GOOD_FILE),
        }
        dump_path = output_dir / f"nan_step_{self.step:06d}.json"
        atomic_write_bytes(dump_path, json.dumps(diagnostics, indent=2).encode())
        logger.error(f"Non-finite loss at step {self.step}; diagnostics in {dump_path}")
        raise NonFiniteLossError(self.step, dump_path)

    def checkpoint_payload(self) -> Dict[str, Any]:
        return {
            "kind": "tokenizer",
            "config": self.config.model_dump(mode="json"),
            "step": self.step,
            "normalization": self.stats.model_dump(),
            "sections": model_sections(self.model),
            "optimizer": self.optimizer.state_dict(),
            "rng": {"numpy": self.rng.bit_generator.state, "torch": torch.get_rng_state()},
            "usage": list(self.usage),
        }

    def restore(self, payload: Dict[str, Any]) -> None:
        load_sections(self.model, payload["sections"])
        self.optimizer.load_state_dict(payload["optimizer"])
        self.rng.bit_generator.state = payload["rng"]["numpy"]
        torch.set_rng_state(payload["rng"]["torch"])
        self.usage = deque(payload.get("usage", []), maxlen=USAGE_WINDOW)
        self.step = int(payload["step"])


class TokenizerService:
    """Service layer for tokenizer training and loading."""

    def __init__(self):
        self.dataset_repository = DatasetRepository()
        self.checkpoint_repository = CheckpointRepository()
        self.metrics_repository = MetricsRepository()

    def train_tokenizer(self, config: TrainConfig, resume: Optional[Path] = None) -> Path:
        """Train for ``config.total_steps`` steps and return the final checkpoint path."""
        if config.dataset_path is None:
            raise ConfigurationError("dataset_path is required to train a tokenizer")
        dataset = self.dataset_repository.load(config.dataset_path)
        if dataset.task != config.task:
            raise ConfigurationError(f"Dataset task {dataset.task.value} does not match config task {config.task.value}")

        output_dir = Path(config.output_dir)
        metrics_path = output_dir / METRICS_FILE
        trainer = TokenizerTrainer(config, dataset_patches(dataset, config), dataset.stats, get_settings().device)

        if resume is not None:
            payload = self.checkpoint_repository.load(resume, kind="tokenizer")
            if payload["config"] != config.model_dump(mode="json"):
                logger.warning(f"Resuming from {resume} with a config that differs from the checkpoint echo")
            trainer.restore(payload)
            self.metrics_repository.truncate_training_rows(metrics_path, trainer.step)
            logger.info(f"Resumed tokenizer training at step {trainer.step}")
        elif metrics_path.exists():
            metrics_path.unlink()

        logger.info(
            f"Training {config.preset} tokenizer on {len(dataset)} sequences "
            f"for {config.total_steps} steps (vq={config.use_vq})"
        )
        for _ in tqdm(range(trainer.step, config.total_steps), disable=not config.progress, desc="tokenizer"):
            result = trainer.training_step()
            self.metrics_repository.append_training_row(metrics_path, result.metrics_row())

            if result.step % config.log_every == 0:
                logger.info(
                    f"step {result.step}: total={result.losses.total:.5f} s2p={result.losses.l_s2p:.5f} "
                    f"p2s={result.losses.l_p2s:.5f} p2p={result.losses.l_p2p:.5f} vq={result.losses.l_vq:.5f} "
                    f"perplexity={result.perplexity:.2f} lr={result.lr:.2e} momentum={result.momentum:.5f}"
                )
            if result.step % config.checkpoint_every == 0 and result.step < config.total_steps:
                self.checkpoint_repository.save(
                    trainer.checkpoint_payload(), output_dir / "checkpoints" / f"step_{result.step:06d}.pt"
                )

        return self.checkpoint_repository.save(trainer.checkpoint_payload(), output_dir / TOKENIZER_FILE)

    def train_ijepa_baseline(self, config: TrainConfig, resume: Optional[Path] = None) -> Path:
        """Same loop with the P2P-only, codebook-free preset."""
        return self.train_tokenizer(apply_preset(config, "ijepa"), resume=resume)

    def load_tokenizer(self, path: Path, device: Optional[str] = None) -> LoadedTokenizer:
        payload = self.checkpoint_repository.load(path, kind="tokenizer")
        config = TrainConfig.model_validate(payload["config"])
        model = DiscreteJepa(config).to(dtype=torch_dtype(config.dtype))
        load_sections(model, payload["sections"])
        model.to(device or get_settings().device).eval()
        for param in model.parameters():
            param.requires_grad_(False)
        return LoadedTokenizer(
            model=model,
            config=config,
            stats=ChannelStats.model_validate(payload["normalization"]),
            digest=self.checkpoint_repository.digest(path),
        )
