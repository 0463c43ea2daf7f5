"""Nearest-neighbour vector quantization with an EMA-maintained codebook."""
import logging
import math
from dataclasses import dataclass
from typing import List, Optional

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from app.core.exceptions import NonFiniteError, ShapeMismatchError
from app.schemas.configs import CodebookMode
from app.schemas.results import CodebookStats


logger = logging.getLogger(__name__)

# Upper bound on the number of elements materialized per distance chunk.
_DISTANCE_CHUNK_ELEMENTS = 1 << 21


@dataclass
class QuantResult:
    indices: torch.Tensor         # (...,) long in [0, K)
    quantized: torch.Tensor       # (..., D) rows copied from the codebook
    commit_loss: torch.Tensor     # β · mean_j ‖z_j − sg(q_j)‖²
    codebook_loss: torch.Tensor   # mean_j ‖sg(z_j) − q_j‖², zero in EMA mode


class Codebook(nn.Module):
    """K code vectors plus the EMA statistics that define them.

    The invariant ``codes[k] == ema_sums[k] / max(ema_counts[k], eps)`` holds after
    construction, every EMA update and every reinitialization. In gradient mode the
    optimizer moves ``codes`` directly; ``track_code_usage`` decays the counts and
    re-derives the sums so the invariant holds again after each step.
    """

    def __init__(
        self,
        num_codes: int,
        dim: int,
        beta: float = 0.25,
        decay: float = 0.99,
        eps: float = 1e-5,
        mode: CodebookMode = CodebookMode.EMA,
    ):
        super().__init__()
        if num_codes < 1:
            raise ValueError("codebook must contain at least one code")
        if not 0.0 < decay <= 1.0:
            raise ValueError(f"decay must be in (0, 1], got {decay}")

        self.num_codes = num_codes
        self.dim = dim
        self.beta = beta
        self.decay = decay
        self.eps = eps
        self.mode = CodebookMode(mode)

        codes = torch.randn(num_codes, dim)
        self.codes = nn.Parameter(codes, requires_grad=self.mode == CodebookMode.GRADIENT)
        self.register_buffer("ema_counts", torch.ones(num_codes))
        self.register_buffer("ema_sums", codes.clone())
        self.register_buffer("initialized", torch.tensor(False))

    @torch.no_grad()
    def init_from(self, pool: torch.Tensor, rng: np.random.Generator) -> None:
        """Seed every code with a row of ``pool`` (first-batch target outputs)."""
        pool = pool.reshape(-1, self.dim).to(self.codes.dtype)
        if pool.shape[0] == 0:
            raise ValueError("cannot initialize a codebook from an empty pool")
        replace = pool.shape[0] < self.num_codes
        rows = torch.from_numpy(rng.choice(pool.shape[0], size=self.num_codes, replace=replace)).long()
        self._reset_codes(torch.arange(self.num_codes), pool[rows.to(pool.device)])
        self.initialized.fill_(True)
        logger.info(f"Initialized {self.num_codes} codes from a pool of {pool.shape[0]} vectors")

    def _reset_codes(self, which: torch.Tensor, rows: torch.Tensor) -> None:
        which = which.to(self.codes.device)
        self.codes.data[which] = rows
        self.ema_sums[which] = rows
        self.ema_counts[which] = 1.0

    def forward(self, z: torch.Tensor, frozen_indices: Optional[torch.Tensor] = None) -> QuantResult:
        return quantize(z, self, frozen_indices=frozen_indices)


def nearest_codes(z: torch.Tensor, codes: torch.Tensor) -> torch.Tensor:
    """Exact argmin_k ‖z_j − c_k‖² per row; ties go to the smallest k."""
    flat = z.reshape(-1, codes.shape[1])
    chunk = max(1, _DISTANCE_CHUNK_ELEMENTS // (codes.shape[0] * codes.shape[1]))
    out = []
    for start in range(0, flat.shape[0], chunk):
        rows = flat[start:start + chunk]
        distances = ((rows[:, None, :] - codes[None, :, :]) ** 2).sum(-1)
        out.append(torch.argmin(distances, dim=1))
    if not out:
        return torch.empty(z.shape[:-1], dtype=torch.long, device=z.device)
    return torch.cat(out).reshape(z.shape[:-1])


def quantize(z: torch.Tensor, codebook: Codebook, frozen_indices: Optional[torch.Tensor] = None) -> QuantResult:
    """Map each row of ``z`` (..., D) to its nearest code.

    ``frozen_indices`` skips the nearest-neighbour search and uses the given
    assignment instead.
    """
    if z.shape[-1] != codebook.dim:
        raise ShapeMismatchError(f"Expected vectors of dim {codebook.dim}, got {z.shape[-1]}")
    if not torch.isfinite(z).all():
        raise NonFiniteError("quantizer input contains non-finite values")

    codes = codebook.codes
    if frozen_indices is None:
        with torch.no_grad():
            indices = nearest_codes(z.detach(), codes.detach())
    else:
        indices = frozen_indices.to(z.device).long()
        if indices.shape != z.shape[:-1]:
            raise ShapeMismatchError(f"frozen indices {tuple(indices.shape)} do not match {tuple(z.shape[:-1])}")

    selected = F.embedding(indices, codes)
    quantized = selected.detach()
    commit_loss = codebook.beta * ((z - quantized) ** 2).sum(-1).mean()
    if codebook.mode == CodebookMode.GRADIENT:
        codebook_loss = ((z.detach() - selected) ** 2).sum(-1).mean()
    else:
        codebook_loss = torch.zeros((), dtype=z.dtype, device=z.device)
    return QuantResult(indices=indices, quantized=quantized, commit_loss=commit_loss, codebook_loss=codebook_loss)


class _StraightThrough(torch.autograd.Function):
    @staticmethod
    def forward(ctx, z, quantized):
        return quantized.clone()

    @staticmethod
    def backward(ctx, grad_output):
        return grad_output, None


def straight_through(z: torch.Tensor, quantized: torch.Tensor) -> torch.Tensor:
    """Forward value of ``quantized``, identity gradient to ``z``."""
    if z.shape != quantized.shape:
        raise ShapeMismatchError(f"straight-through shapes differ: {tuple(z.shape)} vs {tuple(quantized.shape)}")
    return _StraightThrough.apply(z, quantized.detach())


@torch.no_grad()
def ema_codebook_update(codebook: Codebook, z: torch.Tensor, indices: torch.Tensor) -> Codebook:
    flat = z.detach().reshape(-1, codebook.dim).to(codebook.codes.dtype)
    flat_indices = indices.reshape(-1)
    if flat_indices.shape[0] != flat.shape[0]:
        raise ShapeMismatchError(f"{flat_indices.shape[0]} indices for {flat.shape[0]} vectors")

    one_hot = F.one_hot(flat_indices, codebook.num_codes).to(flat.dtype)
    counts = one_hot.sum(0)
    sums = one_hot.t() @ flat

    gamma = codebook.decay
    codebook.ema_counts.mul_(gamma).add_(counts, alpha=1.0 - gamma)
    codebook.ema_sums.mul_(gamma).add_(sums, alpha=1.0 - gamma)
    codebook.codes.data.copy_(codebook.ema_sums / codebook.ema_counts.clamp(min=codebook.eps).unsqueeze(1))
    return codebook


@torch.no_grad()
def track_code_usage(codebook: Codebook, indices: torch.Tensor) -> Codebook:
    """Decay ``ema_counts`` with the batch usage of a gradient-trained codebook.

    Dead-code detection reads the counts in both modes.
    """
    flat_indices = indices.reshape(-1).to(codebook.ema_counts.device)
    counts = torch.bincount(flat_indices, minlength=codebook.num_codes)[: codebook.num_codes]
    gamma = codebook.decay
    codebook.ema_counts.mul_(gamma).add_(counts.to(codebook.ema_counts.dtype), alpha=1.0 - gamma)
    codebook.ema_sums.copy_(codebook.codes.detach() * codebook.ema_counts.clamp(min=codebook.eps).unsqueeze(1))
    return codebook


def codebook_stats(index_history: torch.Tensor | np.ndarray, num_codes: int) -> CodebookStats:
    """Usage histogram, perplexity (exp of usage entropy) and unused-code count."""
    flat = torch.as_tensor(np.asarray(index_history)).reshape(-1).long()
    histogram = torch.bincount(flat, minlength=num_codes)[:num_codes]
    total = int(histogram.sum())
    if total == 0:
        return CodebookStats(histogram=[0] * num_codes, perplexity=0.0, dead_codes=num_codes)

    probs = histogram.double() / total
    nonzero = probs[probs > 0]
    entropy = float(-(nonzero * nonzero.log()).sum())
    return CodebookStats(
        histogram=histogram.tolist(),
        perplexity=math.exp(entropy),
        dead_codes=int((histogram == 0).sum()),
    )


@torch.no_grad()
def reinit_dead_codes(codebook: Codebook, pool: torch.Tensor, threshold: float,
                      rng: np.random.Generator) -> List[int]:
    """Reset codes whose EMA count fell below ``threshold`` to random pool rows.

    Returns the indices of the codes that were reset.
    """
    pool = pool.detach().reshape(-1, codebook.dim).to(codebook.codes.dtype)
    if pool.shape[0] == 0:
        raise ValueError("dead-code reinitialization needs a nonempty pool")

    dead = torch.nonzero(codebook.ema_counts < threshold).flatten()
    if dead.numel() == 0:
        return []

    rows = torch.from_numpy(rng.integers(0, pool.shape[0], size=dead.numel())).long()
    codebook._reset_codes(dead, pool[rows.to(pool.device)])
    logger.info(f"Reinitialized {dead.numel()} dead codes")
    return dead.tolist()
