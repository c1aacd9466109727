"""Central finite-difference checks against the reverse-mode adjoints."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from . import numkernel as nk

# |analytic - numeric| / max(|analytic|, |numeric|, REL_FLOOR); entries whose
# gradient magnitude sits below the floor are judged on absolute error instead.
REL_FLOOR = 1e-6


def numeric_grad(f: Callable[[], float], x: np.ndarray, eps: float = 1e-5) -> np.ndarray:
    """Central differences of scalar ``f()`` w.r.t. array ``x``, perturbed in place."""
    grad = np.zeros_like(x, dtype=np.float64)
    flat = x.reshape(-1)
    gflat = grad.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + eps
        fp = f()
        flat[i] = orig - eps
        fm = f()
        flat[i] = orig
        gflat[i] = (fp - fm) / (2 * eps)
    return grad


def max_rel_error(analytic: np.ndarray, numeric: np.ndarray, floor: float = REL_FLOOR) -> float:
    analytic = np.asarray(analytic, dtype=np.float64)
    numeric = np.asarray(numeric, dtype=np.float64)
    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), floor)
    return float(np.max(np.abs(analytic - numeric) / denom)) if analytic.size else 0.0


@dataclass
class GradCheckRow:
    group: str
    max_rel_err: float
    n_entries: int
    tol: float

    @property
    def passed(self) -> bool:
        return bool(np.isfinite(self.max_rel_err) and self.max_rel_err <= self.tol)


def check_tensors(
    loss_fn: Callable[[], nk.Tensor],
    tensors: Sequence[nk.Tensor],
    names: Sequence[str] | None = None,
    eps: float = 1e-5,
    tol: float = 1e-4,
) -> list[GradCheckRow]:
    """Compare the adjoint of ``loss_fn()`` against finite differences for each
    tensor. ``loss_fn`` must be deterministic (fixed dropout seed etc.)."""
    for t in tensors:
        t.grad = None
    loss = loss_fn()
    analytic = nk.backward(loss, tensors)
    analytic = [g.copy() for g in analytic]
    rows = []
    names = names or [t.name or f"tensor{i}" for i, t in enumerate(tensors)]
    for name, t, ga in zip(names, tensors, analytic):
        gn = numeric_grad(lambda: float(loss_fn().data), t.data, eps)
        rows.append(GradCheckRow(name, max_rel_error(ga, gn), t.data.size, tol))
    return rows


def model_suite(seed: int = 0, eps: float = 1e-5, tol: float = 1e-4) -> list[GradCheckRow]:
    """Every trainable group of the full model under focal + CTC, plus a row
    for the CTC loss w.r.t. its frame logits. Toy dims m=3, T=6, d=8, 2 heads,
    run in 64-bit precision."""
    from . import ctclab
    from .model import ModelConfig, forward, init_params
    from .objective import LossConfig, focal_loss

    with nk.precision(64):
        cfg = ModelConfig(n_layers=3, dim=8, n_heads=2, ffn_dim=16, k=3)
        params = init_params(cfg, seed=seed)
        rng = np.random.default_rng(seed + 1)
        # move the assignment off its symmetric start so every entry matters
        params.assign.data[...] += rng.normal(scale=0.3, size=params.assign.data.shape)
        stacks = rng.normal(size=(2, 3, 6, 8))
        labels = np.array([1, 0])
        targets = [ctclab.TokenSequence((4, 5, 6), 6), ctclab.TokenSequence((1, 2), 6)]

        def loss_fn():
            out = forward(stacks, params, cfg, training=True, rng=seed + 2)
            return nk.add(focal_loss(out.probability, labels, LossConfig()), ctclab.ctc_loss(out.frame_logits, targets))

        names = [n for n, _ in params.named()]
        rows = check_tensors(loss_fn, params.trainables(), names, eps, tol)
        logits = nk.parameter(rng.normal(size=(2, 6, cfg.vocab)), "ctc_logits")
        rows += check_tensors(lambda: ctclab.ctc_loss(logits, targets), [logits], ["ctc_logits"], eps, tol)
    return rows
