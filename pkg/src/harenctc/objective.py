"""Binary focal loss and the focal + CTC training objective."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import numkernel as nk
from .numkernel import Tensor

PROB_CLAMP = 1e-7


@dataclass
class LossConfig:
    focal_alpha: float = 0.5
    focal_gamma: float = 1.5
    ctc_weight: float = 1.0
    ctc_every_n_batches: int = 5
    reduction: str = "sum"
    ctc_reduction: str = "mean"

    def __post_init__(self):
        if not 0.0 < self.focal_alpha < 1.0:
            raise ValueError(f"focal_alpha must lie in (0, 1), got {self.focal_alpha}")
        if self.focal_gamma < 0:
            raise ValueError(f"focal_gamma must be >= 0, got {self.focal_gamma}")
        if self.ctc_weight < 0:
            raise ValueError(f"ctc_weight must be >= 0, got {self.ctc_weight}")
        if self.ctc_every_n_batches < 1:
            raise ValueError("ctc_every_n_batches must be a positive integer")
        if self.reduction not in ("sum", "mean"):
            raise ValueError(f"reduction must be 'sum' or 'mean', got {self.reduction!r}")
        if self.ctc_reduction not in ("sum", "mean"):
            raise ValueError(f"ctc_reduction must be 'sum' or 'mean', got {self.ctc_reduction!r}")


def focal_loss(probs, labels, cfg: LossConfig | None = None) -> Tensor:
    """-sum[a*y*(1-p)^g*log p + (1-a)*(1-y)*p^g*log(1-p)] over the batch.

    Probabilities are clamped to [1e-7, 1-1e-7] before the logs.
    """
    cfg = cfg or LossConfig()
    p = nk.as_tensor(probs)
    y = np.asarray(labels, dtype=p.data.dtype)
    if p.shape != y.shape:
        raise ValueError(f"probs shape {p.shape} does not match labels shape {y.shape}")
    p = nk.clip(p, PROB_CLAMP, 1.0 - PROB_CLAMP)
    q = nk.sub(1.0, p)
    a, g = cfg.focal_alpha, cfg.focal_gamma
    pos = nk.mul(nk.mul(nk.power(q, g), nk.log(p)), a * y)
    neg = nk.mul(nk.mul(nk.power(p, g), nk.log(q)), (1.0 - a) * (1.0 - y))
    total = nk.neg(nk.sum(nk.add(pos, neg)))
    if cfg.reduction == "mean":
        total = nk.mul(total, 1.0 / max(y.size, 1))
    return total


def ctc_due(batch_index: int, cfg: LossConfig) -> bool:
    """Whether the CTC term is computed on this (1-based) batch."""
    return cfg.ctc_weight > 0 and batch_index % cfg.ctc_every_n_batches == 0


def combined_loss(focal: Tensor, ctc: Tensor | None, batch_index: int, cfg: LossConfig) -> Tensor:
    if ctc is None or not ctc_due(batch_index, cfg):
        return focal
    return nk.add(focal, nk.mul(ctc, cfg.ctc_weight))
