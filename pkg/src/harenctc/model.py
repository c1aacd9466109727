"""The HAREN network.

Layer features are softly split into a shallow and a deep subspace by a
row-softmaxed assignment matrix, fused by cross-attention (deep frames query
shallow frames) followed by a pre-norm bottleneck FFN with a residual, and
read out by a pooled sigmoid classifier and a per-frame CTC projection.

All functions accept a leading batch axis: layer stacks are ``(m, T, d)`` or
``(B, m, T, d)``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, fields
from typing import Iterator

import numpy as np

from . import ctclab
from . import numkernel as nk
from .numkernel import Tensor

SHALLOW, DEEP = 0, 1


class ConfigError(ValueError):
    pass


@dataclass
class LayerStack:
    """Per-segment multi-layer features, ``layers`` shaped (m, T, d)."""

    layers: np.ndarray
    frame_rate: float = 50.0
    segment_id: str = ""
    subject_id: str = ""

    def __post_init__(self):
        self.layers = np.asarray(self.layers)
        if self.layers.ndim != 3:
            raise ValueError(f"layer stack must be (m, T, d), got shape {self.layers.shape}")
        m, t, _ = self.layers.shape
        if m < 2:
            raise ValueError(f"need at least 2 layers for shallow/deep grouping, got {m}")
        if t < 1:
            raise ValueError("layer stack has no frames")

    @property
    def n_layers(self) -> int:
        return self.layers.shape[0]

    @property
    def n_frames(self) -> int:
        return self.layers.shape[1]

    @property
    def dim(self) -> int:
        return self.layers.shape[2]


@dataclass
class ModelConfig:
    n_layers: int = 4
    dim: int = 32
    n_heads: int = 4
    ffn_dim: int = 64
    dropout: float = 0.3
    alpha: float = 0.95
    k: int = 5
    ctc_pool_stride: int = 1
    architecture: str = "haren"  # or "single-layer" (no HAC / CMF)
    baseline_layer: int = -1

    def __post_init__(self):
        if self.architecture not in ("haren", "single-layer"):
            raise ConfigError(f"unknown architecture {self.architecture!r}")
        if self.dim % self.n_heads:
            raise ConfigError(f"dim {self.dim} is not divisible by n_heads {self.n_heads}")
        if not 0.0 < self.alpha < 1.0:
            raise ConfigError(f"alpha must lie in (0, 1), got {self.alpha}")
        if self.k < 1:
            raise ConfigError("k must be positive")

    @property
    def vocab(self) -> int:
        return ctclab.vocab_size(self.k)


@dataclass
class AssignmentMatrix:
    logits: Tensor
    decay_alpha: float


def init_assignment_logits(m: int, alpha: float) -> AssignmentMatrix:
    """Exponential-decay initialization: p_l = alpha**l for l = 1..m, shallow
    logit log(p/(1-p)) and deep logit its negation."""
    if not 0.0 < alpha < 1.0:
        raise ValueError(f"alpha must lie in (0, 1), got {alpha}")
    if m < 2:
        raise ValueError(f"need at least 2 layers, got {m}")
    p = alpha ** np.arange(1, m + 1, dtype=np.float64)
    logit = np.log(p / (1.0 - p))
    return AssignmentMatrix(nk.parameter(np.stack([logit, -logit], axis=1), name="assign"), alpha)


def assignment_probs(g: AssignmentMatrix | Tensor) -> Tensor:
    logits = g.logits if isinstance(g, AssignmentMatrix) else g
    return nk.row_softmax(logits)


def cluster_subspaces(stack, probs: Tensor) -> tuple[Tensor, Tensor]:
    """Probability-weighted layer sums ``U_k = sum_l P[l, k] * layer_l``."""
    stack = nk.as_tensor(stack.layers if isinstance(stack, LayerStack) else stack)
    m, t, d = stack.shape[-3:]
    if probs.shape != (m, 2):
        raise nk.DimensionError(f"assignment shape {probs.shape} does not match {m} layers")
    lead = stack.shape[:-3]
    flat = nk.reshape(stack, lead + (m, t * d))
    mixed = nk.matmul(nk.transpose(probs), flat)
    mixed = nk.reshape(mixed, lead + (2, t, d))
    u_shallow = nk.take(mixed, (Ellipsis, SHALLOW, slice(None), slice(None)))
    u_deep = nk.take(mixed, (Ellipsis, DEEP, slice(None), slice(None)))
    return u_shallow, u_deep


def _split_heads(x: Tensor, n_heads: int) -> Tensor:
    *lead, t, d = x.shape
    x = nk.reshape(x, tuple(lead) + (t, n_heads, d // n_heads))
    n = x.ndim
    axes = list(range(n - 3)) + [n - 2, n - 3, n - 1]
    return nk.transpose(x, axes)


def _merge_heads(x: Tensor) -> Tensor:
    *lead, h, t, dh = x.shape
    n = x.ndim
    axes = list(range(n - 3)) + [n - 2, n - 3, n - 1]
    return nk.reshape(nk.transpose(x, axes), tuple(lead) + (t, h * dh))


def cross_attention(u_deep: Tensor, u_shallow: Tensor, params: "ModelParams", n_heads: int):
    """Multi-head attention of deep-subspace queries over shallow keys/values.

    Returns the output projection and the attention weights (..., h, T, T).
    """
    if u_deep.shape != u_shallow.shape:
        raise nk.DimensionError(f"subspace shapes differ: {u_deep.shape} vs {u_shallow.shape}")
    d = u_deep.shape[-1]
    if d % n_heads:
        raise ConfigError(f"dim {d} is not divisible by n_heads {n_heads}")
    q = _split_heads(nk.matmul(u_deep, params.w_q), n_heads)
    k = _split_heads(nk.matmul(u_shallow, params.w_k), n_heads)
    v = _split_heads(nk.matmul(u_shallow, params.w_v), n_heads)
    scores = nk.mul(nk.matmul(q, nk.transpose(k)), 1.0 / math.sqrt(d // n_heads))
    attn = nk.row_softmax(scores)
    out = nk.matmul(_merge_heads(nk.matmul(attn, v)), params.w_o)
    return out, attn


def ffn_block(x: Tensor, params: "ModelParams", dropout: float, training: bool, rng=None) -> Tensor:
    """LayerNorm -> Linear(d, d_ff) -> SiLU -> Dropout -> Linear(d_ff, d)."""
    h = nk.layer_norm(x, params.ln_gain, params.ln_bias)
    h = nk.add(nk.matmul(h, params.ffn_w1), params.ffn_b1)
    h = nk.dropout(nk.silu(h), dropout, training, rng)
    return nk.add(nk.matmul(h, params.ffn_w2), params.ffn_b2)


def cross_modal_fuse(
    u_deep: Tensor, u_shallow: Tensor, params: "ModelParams", cfg: ModelConfig, training: bool, rng=None
) -> Tensor:
    attended, _ = cross_attention(u_deep, u_shallow, params, cfg.n_heads)
    return nk.add(attended, ffn_block(attended, params, cfg.dropout, training, rng))


def classify_head(f: Tensor, w: Tensor, b: Tensor) -> Tensor:
    """sigmoid(mean_T(f) @ w + b), one probability per sequence."""
    pooled = nk.mean_pool_time(f)
    logit = nk.add(nk.matmul(nk.reshape(pooled, pooled.shape[:-1] + (1, pooled.shape[-1])), w), b)
    return nk.sigmoid(nk.reshape(logit, pooled.shape[:-1]))


def ctc_head(f: Tensor, w: Tensor, b: Tensor, pool_stride: int = 1) -> Tensor:
    if w.shape[-1] < 3:
        raise ConfigError(f"CTC vocabulary needs blank plus one token per class, got {w.shape[-1]}")
    return nk.add(nk.matmul(nk.pool_time(f, pool_stride), w), b)


@dataclass
class ModelParams:
    ln_gain: Tensor
    ln_bias: Tensor
    ffn_w1: Tensor
    ffn_b1: Tensor
    ffn_w2: Tensor
    ffn_b2: Tensor
    cls_w: Tensor
    cls_b: Tensor
    ctc_w: Tensor
    ctc_b: Tensor
    assign: Tensor | None = None
    w_q: Tensor | None = None
    w_k: Tensor | None = None
    w_v: Tensor | None = None
    w_o: Tensor | None = None

    def named(self) -> Iterator[tuple[str, Tensor]]:
        for f in fields(self):
            t = getattr(self, f.name)
            if t is not None:
                yield f.name, t

    def trainables(self) -> list[Tensor]:
        return [t for _, t in self.named()]

    def zero_grad(self) -> None:
        for t in self.trainables():
            t.grad = None

    def state_dict(self) -> dict[str, np.ndarray]:
        return {name: t.data.copy() for name, t in self.named()}

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        for name, t in self.named():
            t.data[...] = state[name]


def init_params(cfg: ModelConfig, seed: int = 0) -> ModelParams:
    rng = np.random.default_rng(seed)
    d, dff, v = cfg.dim, cfg.ffn_dim, cfg.vocab

    def dense(fan_in, fan_out, name):
        return nk.parameter(rng.normal(scale=1.0 / math.sqrt(fan_in), size=(fan_in, fan_out)), name=name)

    def const(shape, value, name):
        return nk.parameter(np.full(shape, value, dtype=np.float64), name=name)

    params = ModelParams(
        ln_gain=const(d, 1.0, "ln_gain"),
        ln_bias=const(d, 0.0, "ln_bias"),
        ffn_w1=dense(d, dff, "ffn_w1"),
        ffn_b1=const(dff, 0.0, "ffn_b1"),
        ffn_w2=dense(dff, d, "ffn_w2"),
        ffn_b2=const(d, 0.0, "ffn_b2"),
        cls_w=dense(d, 1, "cls_w"),
        cls_b=const(1, 0.0, "cls_b"),
        ctc_w=dense(d, v, "ctc_w"),
        ctc_b=const(v, 0.0, "ctc_b"),
    )
    if cfg.architecture == "haren":
        params.assign = init_assignment_logits(cfg.n_layers, cfg.alpha).logits
        params.w_q = dense(d, d, "w_q")
        params.w_k = dense(d, d, "w_k")
        params.w_v = dense(d, d, "w_v")
        params.w_o = dense(d, d, "w_o")
    return params


@dataclass
class ModelOutput:
    probability: Tensor  # (B,) or scalar
    frame_logits: Tensor  # (B, T', 2k+1)
    fused: Tensor  # (B, T, d)
    assignment: Tensor | None = None
    extras: dict = field(default_factory=dict)


def forward(stack, params: ModelParams, cfg: ModelConfig, training: bool = False, rng=None) -> ModelOutput:
    """Full forward pass. ``rng`` (seed or Generator) drives dropout."""
    data = stack.layers if isinstance(stack, LayerStack) else stack
    x = nk.as_tensor(data)
    if x.shape[-3] != cfg.n_layers and cfg.architecture == "haren":
        raise nk.DimensionError(f"stack has {x.shape[-3]} layers, model expects {cfg.n_layers}")
    if x.shape[-1] != cfg.dim:
        raise nk.DimensionError(f"stack dim {x.shape[-1]} does not match model dim {cfg.dim}")
    rng = rng if isinstance(rng, np.random.Generator) or rng is None else np.random.default_rng(rng)
    probs = None
    if cfg.architecture == "haren":
        probs = assignment_probs(params.assign)
        u_shallow, u_deep = cluster_subspaces(x, probs)
        fused = cross_modal_fuse(u_deep, u_shallow, params, cfg, training, rng)
    else:
        h = nk.take(x, (Ellipsis, cfg.baseline_layer, slice(None), slice(None)))
        fused = nk.add(h, ffn_block(h, params, cfg.dropout, training, rng))
    prob = classify_head(fused, params.cls_w, params.cls_b)
    logits = ctc_head(fused, params.ctc_w, params.ctc_b, cfg.ctc_pool_stride)
    return ModelOutput(prob, logits, fused, probs)
