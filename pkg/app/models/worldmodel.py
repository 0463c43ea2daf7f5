"""Autoregressive world models over per-frame tokenizer outputs."""
import logging
from dataclasses import dataclass, field
from typing import Any, Dict, List, Optional

import torch
import torch.nn as nn

from app.core.exceptions import ShapeMismatchError
from app.models.layers import TransformerStack, init_weights
from app.schemas.configs import WMVariant


logger = logging.getLogger(__name__)


def embed_indices(indices: torch.Tensor, table: nn.Embedding) -> torch.Tensor:
    if indices.dtype not in (torch.int32, torch.int64):
        raise ValueError(f"indices must be integer, got {indices.dtype}")
    if indices.numel() and (int(indices.min()) < 0 or int(indices.max()) >= table.num_embeddings):
        raise ValueError(f"indices must lie in [0, {table.num_embeddings})")
    return table(indices)


class TokenWorldModel(nn.Module):
    """Transformer encoder over H_c conditioning frames plus H_p learned query frames.

    Tokens are serialized frame-major, slot-minor, with additive time and slot
    embeddings. Discrete variants output logits over the codebook per slot;
    continuous variants regress the token vectors.
    """

    def __init__(
        self,
        variant: WMVariant,
        tokens_per_frame: int,
        token_dim: int,
        num_codes: Optional[int] = None,
        context_frames: int = 4,
        predict_frames: int = 4,
        width: int = 96,
        depth: int = 2,
        num_heads: int = 4,
    ):
        super().__init__()
        self.variant = WMVariant(variant)
        self.tokens_per_frame = tokens_per_frame
        self.token_dim = token_dim
        self.num_codes = num_codes
        self.context_frames = context_frames
        self.predict_frames = predict_frames

        if self.variant.is_discrete and not num_codes:
            raise ShapeMismatchError(f"{self.variant.value} needs a codebook size")

        if self.variant == WMVariant.I2I:
            self.embed = nn.Embedding(num_codes, width)
        else:
            self.in_proj = nn.Linear(token_dim, width)

        frames = context_frames + predict_frames
        self.time_embed = nn.Parameter(torch.zeros(1, frames, 1, width))
        self.slot_embed = nn.Parameter(torch.zeros(1, 1, tokens_per_frame, width))
        self.query_token = nn.Parameter(torch.zeros(1, 1, 1, width))
        self.blocks = TransformerStack(width, depth, num_heads)
        self.head = nn.Linear(width, num_codes if self.variant.is_discrete else token_dim)

        for p in (self.time_embed, self.slot_embed, self.query_token):
            nn.init.trunc_normal_(p, std=0.02)
        self.apply(init_weights)

    def _check_window(self, window: torch.Tensor) -> None:
        expected = (self.context_frames, self.tokens_per_frame)
        if window.shape[1:3] != expected:
            raise ShapeMismatchError(f"window must be (B, {expected[0]}, {expected[1]}, ...), got {tuple(window.shape)}")
        if self.variant == WMVariant.I2I and window.dim() != 3:
            raise ShapeMismatchError(f"i2i windows hold indices (B, H_c, L), got {tuple(window.shape)}")
        if self.variant != WMVariant.I2I and (window.dim() != 4 or window.shape[-1] != self.token_dim):
            raise ShapeMismatchError(
                f"{self.variant.value} windows hold vectors (B, H_c, T, {self.token_dim}), got {tuple(window.shape)}"
            )

    def forward(self, window: torch.Tensor) -> torch.Tensor:
        self._check_window(window)
        B = window.shape[0]
        x = embed_indices(window, self.embed) if self.variant == WMVariant.I2I else self.in_proj(window)
        x = x + self.time_embed[:, : self.context_frames] + self.slot_embed
        queries = self.query_token + self.time_embed[:, self.context_frames:] + self.slot_embed
        queries = queries.expand(B, -1, -1, -1)

        n_context = self.context_frames * self.tokens_per_frame
        h = torch.cat([x.flatten(1, 2), queries.flatten(1, 2)], dim=1)
        h = self.blocks(h)[:, n_context:]
        return self.head(h).reshape(B, self.predict_frames, self.tokens_per_frame, -1)


def wm_forward(model: TokenWorldModel, window: torch.Tensor) -> torch.Tensor:
    """Predict the next H_p frames: logits (B, H_p, L, K) or vectors (B, H_p, T, D)."""
    return model(window)


@dataclass
class RolloutTrace:
    """Per-step predictions of one batched rollout.

    ``indices`` is (B, steps, L) for discrete variants; ``vectors`` holds the fed-back
    vectors (codebook rows for R2I, predictions for R2R).
    """

    variant: WMVariant
    context_frames: int
    predict_frames: int
    total_steps: int
    indices: Optional[torch.Tensor] = None
    vectors: Optional[torch.Tensor] = None
    feedback_checks: int = 0
    feedback_violations: int = 0
    final_window: Optional[torch.Tensor] = None
    decoded: Dict[str, Any] = field(default_factory=dict)

    def __len__(self) -> int:
        return self.total_steps

    def step_tokens(self, step: int) -> torch.Tensor:
        """Tokens predicted at 0-based rollout step ``step``."""
        source = self.indices if self.indices is not None else self.vectors
        return source[:, step]

    def to_records(self) -> List[Dict[str, Any]]:
        return [
            {
                "step": t,
                "indices": None if self.indices is None else self.indices[:, t].clone(),
                "vectors": None if self.vectors is None else self.vectors[:, t].clone(),
            }
            for t in range(self.total_steps)
        ]

    def to_payload(self) -> Dict[str, Any]:
        return {
            "kind": "trace",
            "variant": self.variant.value,
            "context_frames": self.context_frames,
            "predict_frames": self.predict_frames,
            "total_steps": self.total_steps,
            "feedback_checks": self.feedback_checks,
            "feedback_violations": self.feedback_violations,
            "records": self.to_records(),
        }

    @classmethod
    def from_payload(cls, payload: Dict[str, Any]) -> "RolloutTrace":
        records = sorted(payload["records"], key=lambda r: r["step"])
        indices = [r["indices"] for r in records]
        vectors = [r["vectors"] for r in records]
        return cls(
            variant=WMVariant(payload["variant"]),
            context_frames=payload["context_frames"],
            predict_frames=payload["predict_frames"],
            total_steps=payload["total_steps"],
            indices=None if indices[0] is None else torch.stack(indices, dim=1),
            vectors=None if vectors[0] is None else torch.stack(vectors, dim=1),
            feedback_checks=payload["feedback_checks"],
            feedback_violations=payload["feedback_violations"],
        )


def _is_codebook_row(vectors: torch.Tensor, codes: torch.Tensor, chunk: int = 256) -> torch.Tensor:
    flat = vectors.reshape(-1, codes.shape[1])
    return torch.cat([
        (flat[i:i + chunk, None, :] == codes[None, :, :]).all(-1).any(-1)
        for i in range(0, flat.shape[0], chunk)
    ])


@torch.no_grad()
def rollout(
    model: TokenWorldModel,
    initial: torch.Tensor,
    total_steps: int,
    codes: Optional[torch.Tensor] = None,
    temperature: float = 0.0,
    generator: Optional[torch.Generator] = None,
) -> RolloutTrace:
    """Self-feedback rollout from an initial H_c-frame window.

    Each forward pass predicts H_p frames, which are appended to the window before
    it slides to the most recent H_c frames. Discrete variants decode by argmax (or
    sampling when ``temperature > 0``) and feed back indices (I2I) or the matching
    codebook rows (R2I).
    """
    variant = model.variant
    if total_steps < model.predict_frames:
        raise ValueError(f"total_steps {total_steps} is shorter than the prediction horizon {model.predict_frames}")
    if variant == WMVariant.R2I and codes is None:
        raise ValueError("r2i rollout needs the codebook to re-embed predicted indices")

    window = initial
    predicted_indices, predicted_vectors = [], []
    checks = violations = 0
    produced = 0
    while produced < total_steps:
        out = model(window)
        if variant.is_discrete:
            if temperature > 0:
                probs = torch.softmax(out / temperature, dim=-1)
                idx = torch.multinomial(probs.reshape(-1, probs.shape[-1]), 1, generator=generator)
                idx = idx.reshape(out.shape[:-1])
            else:
                idx = out.argmax(dim=-1)
            predicted_indices.append(idx)
            in_range = (idx >= 0) & (idx < model.num_codes)
            checks += idx.numel()
            violations += int((~in_range).sum())
            if variant == WMVariant.R2I:
                feed = codes[idx]
                violations += int((~_is_codebook_row(feed, codes)).sum())
                checks += idx.numel()
                predicted_vectors.append(feed)
            else:
                feed = idx
        else:
            feed = out
            predicted_vectors.append(feed)

        window = torch.cat([window, feed], dim=1)[:, -model.context_frames:]
        produced += model.predict_frames

    if violations:
        logger.warning(f"{violations} fed-back tokens were not codebook members")
    return RolloutTrace(
        variant=variant,
        context_frames=model.context_frames,
        predict_frames=model.predict_frames,
        total_steps=total_steps,
        indices=torch.cat(predicted_indices, dim=1)[:, :total_steps] if predicted_indices else None,
        vectors=torch.cat(predicted_vectors, dim=1)[:, :total_steps] if predicted_vectors else None,
        feedback_checks=checks,
        feedback_violations=violations,
        final_window=window,
    )
