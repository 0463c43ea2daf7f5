import math

from app.schemas.configs import MomentumSchedule


def lr_at(step: int, total: int, base: float, warmup_frac: float) -> float:
    """Linear warmup from 0 to ``base`` then cosine decay to 0 at ``total``."""
    if total <= 0:
        raise ValueError(f"total steps must be positive, got {total}")
    if not 0 <= step <= total:
        raise ValueError(f"step {step} outside [0, {total}]")

    warmup = warmup_frac * total
    if step < warmup:
        return base * step / warmup
    if total == warmup:
        return base
    progress = (step - warmup) / (total - warmup)
    return base * (1.0 + math.cos(math.pi * progress)) / 2.0


def momentum_at(step: int, total: int, start: float, end: float,
                schedule: MomentumSchedule = MomentumSchedule.LINEAR) -> float:
    """Target-encoder EMA momentum, ramped from ``start`` to ``end`` over training."""
    progress = min(max(step / total, 0.0), 1.0)
    if MomentumSchedule(schedule) == MomentumSchedule.COSINE:
        return end - (end - start) * (math.cos(math.pi * progress) + 1.0) / 2.0
    return start + (end - start) * progress


def vq_weight_at(step: int, total: int, warmup_frac: float) -> float:
    """Quantization-loss weight ramping linearly to 1 over the first ``warmup_frac`` of steps."""
    warmup = warmup_frac * total
    if warmup <= 0:
        return 1.0
    return min(step / warmup, 1.0)
