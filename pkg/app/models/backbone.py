"""Patchification, masking and the context/target encoder pair with semantic slots."""
import logging
from dataclasses import dataclass
from typing import Optional, Sequence, Tuple

import numpy as np
import torch
import torch.nn as nn
from einops import rearrange

from app.core.exceptions import ShapeMismatchError
from app.models.layers import TransformerStack, init_weights


logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class MaskSpec:
    """Partition of the patch positions into visible (context) and target sets."""

    visible: torch.Tensor
    targets: torch.Tensor
    n_patches: int

    def __post_init__(self):
        visible = set(self.visible.tolist())
        targets = set(self.targets.tolist())
        if visible & targets:
            raise ValueError("visible and target patch sets overlap")
        if visible | targets != set(range(self.n_patches)):
            raise ValueError("visible and target sets must cover every patch")
        if len(visible) != len(self.visible) or len(targets) != len(self.targets):
            raise ValueError("mask indices must be unique")

    @classmethod
    def full(cls, n_patches: int) -> "MaskSpec":
        """Every patch visible, no targets."""
        return cls(torch.arange(n_patches), torch.empty(0, dtype=torch.long), n_patches)

    @property
    def ratio(self) -> float:
        return len(self.targets) / self.n_patches


@dataclass(frozen=True)
class TokenBundle:
    z_s: torch.Tensor        # (B, L, D_s)
    z_p: torch.Tensor        # (B, len(positions), D)
    positions: torch.Tensor  # patch indices covered by z_p


def patchify(frames: torch.Tensor, patch_size: int) -> torch.Tensor:
    """(..., H, W, C) -> (..., N_p, patch_size * patch_size * C), patches in row-major order."""
    height, width = frames.shape[-3], frames.shape[-2]
    if height % patch_size or width % patch_size:
        raise ShapeMismatchError(
            f"Frame {height}x{width} is not divisible by patch size {patch_size}"
        )
    return rearrange(frames, "... (h p1) (w p2) c -> ... (h w) (p1 p2 c)", p1=patch_size, p2=patch_size)


def normalize_frames(frames: np.ndarray | torch.Tensor, mean: Sequence[float], std: Sequence[float],
                     dtype: torch.dtype = torch.float32) -> torch.Tensor:
    """uint8 frames -> [0, 1] -> per-channel standardized tensor."""
    x = torch.as_tensor(np.asarray(frames)).to(dtype) / 255.0
    mean_t = torch.tensor(mean, dtype=dtype)
    std_t = torch.tensor(std, dtype=dtype)
    return (x - mean_t) / std_t


def frames_to_patches(frames: np.ndarray | torch.Tensor, mean: Sequence[float], std: Sequence[float],
                      patch_size: int, dtype: torch.dtype = torch.float32) -> torch.Tensor:
    return patchify(normalize_frames(frames, mean, std, dtype), patch_size)


def sample_mask(n_patches: int, ratio_range: Tuple[float, float], rng: np.random.Generator) -> MaskSpec:
    """Uniform random target set whose size is round(r * n_patches), r ~ U[lo, hi]."""
    lo, hi = ratio_range
    if not 0.0 < lo <= hi < 1.0:
        raise ValueError(f"ratio range must satisfy 0 < lo <= hi < 1, got {ratio_range}")

    ratio = lo if hi == lo else rng.uniform(lo, hi)
    n_targets = min(max(int(round(ratio * n_patches)), 1), n_patches - 1)
    order = rng.permutation(n_patches)
    targets = torch.from_numpy(np.sort(order[:n_targets])).long()
    visible = torch.from_numpy(np.sort(order[n_targets:])).long()
    return MaskSpec(visible=visible, targets=targets, n_patches=n_patches)


class SemanticEncoder(nn.Module):
    """ViT over [semantic slots; patch tokens] with full bidirectional attention.

    The first ``num_slots`` outputs are projected to ``slot_dim`` and returned as z_s;
    the remaining outputs are the patch tokens z_p at the requested positions.
    """

    def __init__(
        self,
        num_patches: int,
        patch_dim: int,
        width: int = 192,
        depth: int = 4,
        num_heads: int = 4,
        num_slots: int = 8,
        slot_dim: int = 96,
    ):
        super().__init__()
        self.num_patches = num_patches
        self.num_slots = num_slots
        self.width = width
        self.slot_dim = slot_dim

        self.patch_embed = nn.Linear(patch_dim, width)
        self.pos_embed = nn.Parameter(torch.zeros(1, num_patches, width))
        self.slots = nn.Parameter(torch.zeros(1, num_slots, width))
        self.encoder = TransformerStack(width, depth, num_heads)
        self.semantic_head = nn.Linear(width, slot_dim)

        nn.init.trunc_normal_(self.pos_embed, std=0.02)
        nn.init.trunc_normal_(self.slots, std=0.02)
        self.apply(init_weights)

    def forward(self, patches: torch.Tensor, positions: Optional[torch.Tensor] = None,
                isolate_slots: bool = False) -> TokenBundle:
        """``patches`` is (B, N_p, patch_dim); ``positions`` selects the visible patches.

        ``isolate_slots`` blocks slot queries from attending to patch keys (ablation hook).
        """
        if patches.shape[1] != self.num_patches:
            raise ShapeMismatchError(f"Expected {self.num_patches} patches, got {patches.shape[1]}")
        if positions is None:
            positions = torch.arange(self.num_patches, device=patches.device)

        B = patches.shape[0]
        x = self.patch_embed(patches[:, positions]) + self.pos_embed[:, positions]
        h = torch.cat([self.slots.expand(B, -1, -1), x], dim=1)

        attn_mask = None
        if isolate_slots:
            n = h.shape[1]
            attn_mask = torch.ones(n, n, dtype=torch.bool, device=h.device)
            attn_mask[: self.num_slots, self.num_slots:] = False

        h = self.encoder(h, attn_mask=attn_mask)
        return TokenBundle(
            z_s=self.semantic_head(h[:, : self.num_slots]),
            z_p=h[:, self.num_slots:],
            positions=positions,
        )


def encode_context(encoder: SemanticEncoder, patches: torch.Tensor, mask: MaskSpec,
                   isolate_slots: bool = False) -> TokenBundle:
    return encoder(patches, mask.visible.to(patches.device), isolate_slots=isolate_slots)


@torch.no_grad()
def encode_target(encoder: SemanticEncoder, patches: torch.Tensor) -> TokenBundle:
    return encoder(patches)


@torch.no_grad()
def ema_update(target: nn.Module, context: nn.Module, momentum: float) -> nn.Module:
    """target <- m * target + (1 - m) * context, tensor by tensor."""
    if not 0.0 <= momentum <= 1.0:
        raise ValueError(f"momentum must be in [0, 1], got {momentum}")

    target_params = dict(target.named_parameters())
    context_params = dict(context.named_parameters())
    if target_params.keys() != context_params.keys():
        raise ShapeMismatchError("target and context encoders have different parameter names")

    for name, param in target_params.items():
        source = context_params[name]
        if param.shape != source.shape:
            raise ShapeMismatchError(f"Parameter '{name}' shape {tuple(param.shape)} != {tuple(source.shape)}")
        param.mul_(momentum).add_(source, alpha=1.0 - momentum)
    return target
