"""Evaluation heads on frozen tokens: linear property probe and pixel-class decoder."""
import numpy as np
import torch
import torch.nn as nn
from einops import rearrange

from app.models.layers import init_weights
from app.services.datagen_service import NUM_PIXEL_CLASSES


class ProbeHead(nn.Module):
    """Average-pool over tokens followed by a single affine map."""

    def __init__(self, token_dim: int, num_classes: int):
        super().__init__()
        self.linear = nn.Linear(token_dim, num_classes)

    def forward(self, tokens: torch.Tensor) -> torch.Tensor:
        return self.linear(tokens.mean(dim=1))


@torch.no_grad()
def probe_predict(head: ProbeHead, tokens: torch.Tensor) -> torch.Tensor:
    return head(tokens).argmax(dim=-1)


class LARS(torch.optim.Optimizer):
    """Momentum SGD with a layer-wise trust ratio applied to matrices only.

    Biases and other 1-d tensors are updated as plain momentum SGD.
    """

    def __init__(self, params, lr: float = 0.1, weight_decay: float = 0.0, momentum: float = 0.9,
                 trust_coefficient: float = 0.001):
        defaults = dict(lr=lr, weight_decay=weight_decay, momentum=momentum, trust_coefficient=trust_coefficient)
        super().__init__(params, defaults)

    @torch.no_grad()
    def step(self, closure=None):
        loss = None
        if closure is not None:
            with torch.enable_grad():
                loss = closure()

        for group in self.param_groups:
            for p in group["params"]:
                if p.grad is None:
                    continue
                update = p.grad
                if p.ndim > 1:
                    update = update.add(p, alpha=group["weight_decay"])
                    param_norm = torch.norm(p)
                    update_norm = torch.norm(update)
                    one = torch.ones_like(param_norm)
                    ratio = torch.where(
                        param_norm > 0.0,
                        torch.where(update_norm > 0.0, group["trust_coefficient"] * param_norm / update_norm, one),
                        one,
                    )
                    update = update.mul(ratio)

                state = self.state[p]
                if "mu" not in state:
                    state["mu"] = torch.zeros_like(p)
                mu = state["mu"]
                mu.mul_(group["momentum"]).add_(update)
                p.add_(mu, alpha=-group["lr"])
        return loss


def reset_to_white(frame: np.ndarray) -> np.ndarray:
    """Paint every non-background pixel white, removing all ball colors."""
    out = np.asarray(frame).copy()
    out[(out != 0).any(axis=-1)] = 255
    return out


def white_reset_patches(frames: np.ndarray, patch_size: int, dtype: torch.dtype = torch.float32) -> torch.Tensor:
    """White-reset frames scaled to [0, 1] and patchified: (..., N_p, patch_size² · 3)."""
    x = torch.as_tensor(reset_to_white(frames)).to(dtype) / 255.0
    return rearrange(x, "... (h p1) (w p2) c -> ... (h w) (p1 p2 c)", p1=patch_size, p2=patch_size)


class PixelDecoder(nn.Module):
    """Transformer decoder without causal mask.

    Queries are the patches of the white-reset frame; keys and values are the
    projected tokenizer tokens. Outputs per-pixel logits over the pixel classes.
    """

    def __init__(
        self,
        token_dim: int,
        image_size: int = 64,
        patch_size: int = 8,
        width: int = 64,
        depth: int = 3,
        num_heads: int = 4,
        num_classes: int = NUM_PIXEL_CLASSES,
    ):
        super().__init__()
        self.patch_size = patch_size
        self.grid = image_size // patch_size
        self.num_classes = num_classes

        self.query_proj = nn.Linear(patch_size * patch_size * 3, width)
        self.pos_embed = nn.Parameter(torch.zeros(1, self.grid * self.grid, width))
        self.memory_proj = nn.Linear(token_dim, width)
        layer = nn.TransformerDecoderLayer(
            d_model=width,
            nhead=num_heads,
            dim_feedforward=4 * width,
            dropout=0.0,
            batch_first=True,
            norm_first=True,
        )
        self.decoder = nn.TransformerDecoder(layer, num_layers=depth, norm=nn.LayerNorm(width))
        self.head = nn.Linear(width, patch_size * patch_size * num_classes)

        nn.init.trunc_normal_(self.pos_embed, std=0.02)
        self.apply(init_weights)

    def forward(self, query_patches: torch.Tensor, tokens: torch.Tensor) -> torch.Tensor:
        """(B, N_p, p²·3), (B, T, D) -> logits (B, classes, H, W)."""
        queries = self.query_proj(query_patches) + self.pos_embed
        h = self.decoder(queries, self.memory_proj(tokens))
        logits = self.head(h)
        return rearrange(
            logits,
            "b (h w) (p1 p2 c) -> b c (h p1) (w p2)",
            h=self.grid,
            p1=self.patch_size,
            p2=self.patch_size,
            c=self.num_classes,
        )


@torch.no_grad()
def decode_pixels(decoder: PixelDecoder, tokens: torch.Tensor, query_patches: torch.Tensor) -> torch.Tensor:
    """Per-pixel argmax class map (B, H, W)."""
    return decoder(query_patches, tokens).argmax(dim=1)
