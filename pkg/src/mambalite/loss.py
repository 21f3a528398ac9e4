"""Binary cross-entropy, soft Dice and their unweighted sum."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import functional as F
from .tensor import Tensor, as_tensor

CLAMP = 1e-7
MODES = ("bce", "dice", "both")


@dataclass
class LossConfig:
    mode: str = "both"
    dice_smooth: float = 1.0

    def validate(self) -> "LossConfig":
        if self.mode not in MODES:
            raise ValueError(f"loss mode must be one of {MODES}, got {self.mode!r}")
        if not self.dice_smooth > 0:
            raise ValueError("dice_smooth must be positive")
        return self


def _check(p: Tensor, g) -> Tensor:
    g = g if isinstance(g, Tensor) else as_tensor(np.asarray(g, dtype=p.dtype))
    if p.shape != g.shape:
        raise ValueError(f"prediction {p.shape} and mask {g.shape} shapes differ")
    if not np.all((g.data == 0) | (g.data == 1)):
        raise ValueError("mask must be binary")
    if g.dtype != p.dtype:
        g = as_tensor(g.data.astype(p.dtype))
    return g


def bce_loss(p: Tensor, g) -> Tensor:
    """Mean binary cross-entropy with probabilities clamped to [1e-7, 1-1e-7]."""
    g = _check(p, g)
    pc = F.clamp(p, CLAMP, 1.0 - CLAMP)
    ll = F.add(F.mul(g, F.log(pc)), F.mul(F.sub(1.0, g), F.log(F.sub(1.0, pc))))
    return F.mul(F.mean(ll), -1.0)


def dice_loss(p: Tensor, g, smooth: float = 1.0) -> Tensor:
    """Soft Dice loss per image, averaged over the batch.

    ``1 - (2 Σpg + s) / (Σp + Σg + s)`` with sums over all non-batch axes.
    """
    g = _check(p, g)
    axes = tuple(range(1, p.ndim))
    inter = F.sum(F.mul(p, g), axis=axes)
    denom = F.add(F.sum(p, axis=axes), F.sum(g, axis=axes))
    score = F.div(F.add(F.mul(inter, 2.0), smooth), F.add(denom, smooth))
    return F.sub(1.0, F.mean(score))


def total_loss(p: Tensor, g, cfg: LossConfig = LossConfig()) -> Tensor:
    cfg.validate()
    if cfg.mode == "bce":
        return bce_loss(p, g)
    if cfg.mode == "dice":
        return dice_loss(p, g, cfg.dice_smooth)
    return F.add(bce_loss(p, g), dice_loss(p, g, cfg.dice_smooth))
