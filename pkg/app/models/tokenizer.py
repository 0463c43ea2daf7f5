"""Container for the full tokenizer: encoders, codebook and predictors."""
import copy
from dataclasses import dataclass
from typing import Optional

import torch
import torch.nn as nn

from app.models.backbone import MaskSpec, SemanticEncoder, encode_context, encode_target
from app.models.objectives import (
    LossTerms,
    PatchToPatchPredictor,
    PatchToSemanticPredictor,
    SemanticToPatchPredictor,
    compute_losses,
)
from app.models.quantizer import Codebook, QuantResult, nearest_codes, straight_through
from app.schemas.configs import TokenView, TrainConfig


@dataclass
class TokenizerStep:
    losses: LossTerms
    quant: Optional[QuantResult]
    target_z_s: torch.Tensor                 # continuous target slots, (B, L, D_s)
    target_indices: Optional[torch.Tensor]   # codebook assignment of the target slots


@dataclass
class EncodedFrames:
    """Frozen-tokenizer outputs for a batch of frames."""

    semantic: torch.Tensor                   # (B, L, D_s), quantized when a codebook exists
    patch: torch.Tensor                      # (B, N_p, D)
    indices: Optional[torch.Tensor] = None   # (B, L)

    def view(self, view: TokenView) -> torch.Tensor:
        if view == TokenView.SEMANTIC:
            return self.semantic
        if view == TokenView.PATCH:
            return self.patch
        return self.patch.mean(dim=1, keepdim=True)


class DiscreteJepa(nn.Module):
    def __init__(self, config: TrainConfig):
        super().__init__()
        self.config = config
        self.context_encoder = SemanticEncoder(
            num_patches=config.num_patches,
            patch_dim=config.patch_dim,
            width=config.width,
            depth=config.depth,
            num_heads=config.num_heads,
            num_slots=config.num_slots,
            slot_dim=config.slot_dim,
        )
        self.target_encoder = copy.deepcopy(self.context_encoder)
        for param in self.target_encoder.parameters():
            param.requires_grad_(False)

        self.codebook = None
        if config.use_vq:
            self.codebook = Codebook(
                num_codes=config.codebook_size,
                dim=config.slot_dim,
                beta=config.beta,
                decay=config.codebook_decay,
                eps=config.codebook_eps,
                mode=config.codebook_mode,
            )

        width = config.effective_predictor_width
        depth, heads = config.predictor_depth, config.predictor_heads
        self.s2p = SemanticToPatchPredictor(
            config.slot_dim, config.width, config.num_slots, config.num_patches, width, depth, heads
        ) if config.use_s2p else None
        self.p2s = PatchToSemanticPredictor(
            config.width, config.slot_dim, config.num_slots, config.num_patches, width, depth, heads
        ) if config.use_p2s else None
        self.p2p = PatchToPatchPredictor(
            config.width, config.num_patches, width, depth, heads
        ) if config.use_p2p else None

    @property
    def lambdas(self):
        return {"s2p": self.config.lambda_s2p, "p2s": self.config.lambda_p2s, "p2p": self.config.lambda_p2p}

    def forward_losses(
        self,
        patches: torch.Tensor,
        mask: MaskSpec,
        vq_weight: float = 1.0,
        frozen_indices: Optional[torch.Tensor] = None,
        isolate_slots: bool = False,
    ) -> TokenizerStep:
        """One forward pass of every enabled objective on a batch of patchified frames."""
        target = encode_target(self.target_encoder, patches)
        context = encode_context(self.context_encoder, patches, mask, isolate_slots=isolate_slots)

        quant = None
        target_indices = None
        z_s = context.z_s
        if self.codebook is not None:
            quant = self.codebook(context.z_s, frozen_indices=frozen_indices)
            z_s = straight_through(context.z_s, quant.quantized)
            with torch.no_grad():
                target_indices = nearest_codes(target.z_s, self.codebook.codes.detach())

        targets_p = target.z_p[:, mask.targets.to(patches.device)]
        preds, targets = {}, {}
        if self.s2p is not None:
            preds["s2p"] = self.s2p(z_s, mask.targets)
            targets["s2p"] = targets_p
        if self.p2s is not None:
            preds["p2s"] = self.p2s(context.z_p, mask.visible)
            targets["p2s"] = target.z_s
        if self.p2p is not None:
            preds["p2p"] = self.p2p(context.z_p, mask.visible, mask.targets)
            targets["p2p"] = targets_p

        losses = compute_losses(preds, targets, quant, self.lambdas, vq_weight=vq_weight)
        return TokenizerStep(losses=losses, quant=quant, target_z_s=target.z_s, target_indices=target_indices)

    @torch.no_grad()
    def encode(self, patches: torch.Tensor) -> EncodedFrames:
        """Tokenize full (unmasked) frames with the target encoder."""
        bundle = encode_target(self.target_encoder, patches)
        if self.codebook is None:
            return EncodedFrames(semantic=bundle.z_s, patch=bundle.z_p)
        quant = self.codebook(bundle.z_s)
        return EncodedFrames(semantic=quant.quantized, patch=bundle.z_p, indices=quant.indices)
