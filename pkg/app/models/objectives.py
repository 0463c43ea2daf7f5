"""Semantic-to-patch, patch-to-semantic and patch-to-patch predictors and their losses."""
from dataclasses import dataclass, field
from typing import Dict, Optional

import torch
import torch.nn as nn
import torch.nn.functional as F

from app.core.exceptions import ShapeMismatchError
from app.models.layers import TransformerStack, init_weights
from app.models.quantizer import QuantResult
from app.schemas.results import LossBreakdown


def _check_positions(positions: torch.Tensor, num_patches: int, what: str) -> None:
    if positions.numel() == 0:
        raise ValueError(f"{what} set must not be empty")
    if int(positions.min()) < 0 or int(positions.max()) >= num_patches:
        raise ValueError(f"{what} positions must lie in [0, {num_patches})")


class _Predictor(nn.Module):
    def __init__(self, in_dim: int, out_dim: int, width: int, depth: int, num_heads: int):
        super().__init__()
        self.in_proj = nn.Linear(in_dim, width)
        self.blocks = TransformerStack(width, depth, num_heads)
        self.out_proj = nn.Linear(width, out_dim)

    def _run(self, tokens: torch.Tensor, queries: torch.Tensor) -> torch.Tensor:
        """Attend over [tokens; queries] and read out the query positions."""
        h = self.blocks(torch.cat([tokens, queries], dim=1))
        return self.out_proj(h[:, tokens.shape[1]:])


class SemanticToPatchPredictor(_Predictor):
    """Predicts target patch tokens from the (discrete) semantic slots alone."""

    def __init__(self, slot_dim: int, token_dim: int, num_slots: int, num_patches: int,
                 width: int, depth: int = 2, num_heads: int = 4):
        super().__init__(slot_dim, token_dim, width, depth, num_heads)
        self.num_patches = num_patches
        self.slot_embed = nn.Parameter(torch.zeros(1, num_slots, width))
        self.pos_queries = nn.Parameter(torch.zeros(1, num_patches, width))
        nn.init.trunc_normal_(self.slot_embed, std=0.02)
        nn.init.trunc_normal_(self.pos_queries, std=0.02)
        self.apply(init_weights)

    def forward(self, z_s: torch.Tensor, targets: torch.Tensor) -> torch.Tensor:
        _check_positions(targets, self.num_patches, "target")
        tokens = self.in_proj(z_s) + self.slot_embed
        queries = self.pos_queries[:, targets].expand(z_s.shape[0], -1, -1)
        return self._run(tokens, queries)


class PatchToSemanticPredictor(_Predictor):
    """Predicts the continuous target semantic slots from visible patch tokens."""

    def __init__(self, token_dim: int, slot_dim: int, num_slots: int, num_patches: int,
                 width: int, depth: int = 2, num_heads: int = 4):
        super().__init__(token_dim, slot_dim, width, depth, num_heads)
        self.num_patches = num_patches
        self.pos_embed = nn.Parameter(torch.zeros(1, num_patches, width))
        self.slot_queries = nn.Parameter(torch.zeros(1, num_slots, width))
        nn.init.trunc_normal_(self.pos_embed, std=0.02)
        nn.init.trunc_normal_(self.slot_queries, std=0.02)
        self.apply(init_weights)

    def forward(self, z_p: torch.Tensor, visible: torch.Tensor) -> torch.Tensor:
        _check_positions(visible, self.num_patches, "visible")
        if z_p.shape[1] != visible.numel():
            raise ShapeMismatchError(f"{z_p.shape[1]} patch tokens for {visible.numel()} visible positions")
        tokens = self.in_proj(z_p) + self.pos_embed[:, visible]
        return self._run(tokens, self.slot_queries.expand(z_p.shape[0], -1, -1))


class PatchToPatchPredictor(_Predictor):
    """I-JEPA style predictor: visible patch tokens plus mask tokens at the target positions."""

    def __init__(self, token_dim: int, num_patches: int, width: int, depth: int = 2, num_heads: int = 4):
        super().__init__(token_dim, token_dim, width, depth, num_heads)
        self.num_patches = num_patches
        self.pos_embed = nn.Parameter(torch.zeros(1, num_patches, width))
        self.mask_token = nn.Parameter(torch.zeros(1, 1, width))
        nn.init.trunc_normal_(self.pos_embed, std=0.02)
        nn.init.trunc_normal_(self.mask_token, std=0.02)
        self.apply(init_weights)

    def forward(self, z_p: torch.Tensor, visible: torch.Tensor, targets: torch.Tensor) -> torch.Tensor:
        _check_positions(visible, self.num_patches, "visible")
        _check_positions(targets, self.num_patches, "target")
        if z_p.shape[1] != visible.numel():
            raise ShapeMismatchError(f"{z_p.shape[1]} patch tokens for {visible.numel()} visible positions")
        if set(visible.tolist()) & set(targets.tolist()):
            raise ValueError("target positions overlap the visible positions")

        tokens = self.in_proj(z_p) + self.pos_embed[:, visible]
        queries = (self.mask_token + self.pos_embed[:, targets]).expand(z_p.shape[0], -1, -1)
        return self._run(tokens, queries)


@dataclass
class LossTerms:
    l_s2p: torch.Tensor
    l_p2s: torch.Tensor
    l_p2p: torch.Tensor
    l_vq: torch.Tensor
    total: torch.Tensor
    lambdas: Dict[str, float] = field(default_factory=dict)

    def breakdown(self) -> LossBreakdown:
        return LossBreakdown(
            l_s2p=float(self.l_s2p.detach()),
            l_p2s=float(self.l_p2s.detach()),
            l_p2p=float(self.l_p2p.detach()),
            l_vq=float(self.l_vq.detach()),
            total=float(self.total.detach()),
            lambda_s2p=self.lambdas.get("s2p", 0.0),
            lambda_p2s=self.lambdas.get("p2s", 0.0),
            lambda_p2p=self.lambdas.get("p2p", 0.0),
        )


def compute_losses(
    preds: Dict[str, torch.Tensor],
    targets: Dict[str, torch.Tensor],
    quant: Optional[QuantResult],
    lambdas: Dict[str, float],
    vq_weight: float = 1.0,
) -> LossTerms:
    """Mean squared error per enabled objective, weighted sum plus the VQ term.

    ``preds`` and ``targets`` are keyed by ``s2p``, ``p2s`` and ``p2p``; absent keys
    contribute zero.
    """
    reference = next(iter(preds.values()), None)
    if reference is None and quant is not None:
        reference = quant.commit_loss
    if reference is None:
        raise ValueError("no objective is enabled")
    zero = torch.zeros((), dtype=reference.dtype, device=reference.device)

    terms = {}
    for name in ("s2p", "p2s", "p2p"):
        if name not in preds:
            terms[name] = zero
            continue
        if preds[name].shape != targets[name].shape:
            raise ShapeMismatchError(
                f"{name} prediction {tuple(preds[name].shape)} != target {tuple(targets[name].shape)}"
            )
        terms[name] = F.mse_loss(preds[name], targets[name].detach())

    l_vq = zero if quant is None else vq_weight * (quant.commit_loss + quant.codebook_loss)
    used = {name: lambdas.get(name, 0.0) if name in preds else 0.0 for name in ("s2p", "p2s", "p2p")}
    total = used["s2p"] * terms["s2p"] + used["p2s"] * terms["p2s"] + used["p2p"] * terms["p2p"] + l_vq
    return LossTerms(
        l_s2p=terms["s2p"],
        l_p2s=terms["p2s"],
        l_p2p=terms["p2p"],
        l_vq=l_vq,
        total=total,
        lambdas=used,
    )
