"""CTC pseudo-labels and the CTC loss.

Frames of the tokenization channel are quantized against a K-means codebook,
shifted into a class-specific token range (blank is 0, non-depressed tokens
1..k, depressed tokens k+1..2k) and collapsed. The loss runs the forward /
backward recursions over the blank-extended target in log space.
"""

from __future__ import annotations

import itertools
import logging
import math
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from . import numkernel as nk

log = logging.getLogger(__name__)

BLANK = 0
ND, D = 0, 1

CODEBOOK_MAGIC = b"HRNC"
CODEBOOK_VERSION = 1
_CODEBOOK_HEADER = struct.Struct("<4sIII")


class CTCInfeasibleError(ValueError):
    """Target cannot be aligned to the given number of frames."""


class CodebookFormatError(ValueError):
    pass


def vocab_size(k: int) -> int:
    return 2 * k + 1


# -- codebook ---------------------------------------------------------------


@dataclass
class Codebook:
    centroids: np.ndarray
    fit_seed: int | None = None
    iterations_run: int = 0
    inertia: float = float("nan")
    inertia_history: list[float] = field(default_factory=list)

    @property
    def k(self) -> int:
        return self.centroids.shape[0]

    @property
    def dim(self) -> int:
        return self.centroids.shape[1]

    def to_bytes(self) -> bytes:
        header = _CODEBOOK_HEADER.pack(CODEBOOK_MAGIC, CODEBOOK_VERSION, self.k, self.dim)
        return header + np.ascontiguousarray(self.centroids, dtype="<f8").tobytes()

    @classmethod
    def from_bytes(cls, blob: bytes) -> "Codebook":
        if len(blob) < _CODEBOOK_HEADER.size:
            raise CodebookFormatError(f"codebook truncated at byte 0: {len(blob)} bytes, header needs {_CODEBOOK_HEADER.size}")
        magic, version, k, dim = _CODEBOOK_HEADER.unpack_from(blob)
        if magic != CODEBOOK_MAGIC:
            raise CodebookFormatError(f"bad codebook magic {magic!r} at byte 0")
        if version != CODEBOOK_VERSION:
            raise CodebookFormatError(f"unsupported codebook version {version} at byte 4")
        expected = _CODEBOOK_HEADER.size + 8 * k * dim
        if len(blob) != expected:
            raise CodebookFormatError(
                f"codebook payload at byte {_CODEBOOK_HEADER.size}: expected {expected} bytes total, got {len(blob)}"
            )
        cents = np.frombuffer(blob, dtype="<f8", offset=_CODEBOOK_HEADER.size).reshape(k, dim)
        return cls(cents.astype(np.float64))

    def save(self, path: str | Path) -> None:
        Path(path).write_bytes(self.to_bytes())

    @classmethod
    def load(cls, path: str | Path) -> "Codebook":
        return cls.from_bytes(Path(path).read_bytes())


def _sq_dists(x: np.ndarray, centroids: np.ndarray, chunk: int = 16384) -> np.ndarray:
    # explicit differences rather than the |x|^2 - 2xc + |c|^2 expansion so
    # that exact ties stay exact
    out = np.empty((x.shape[0], centroids.shape[0]))
    for start in range(0, x.shape[0], chunk):
        diff = x[start : start + chunk, None, :] - centroids[None, :, :]
        out[start : start + chunk] = np.einsum("nkd,nkd->nk", diff, diff)
    return out


def _kmeanspp(x: np.ndarray, k: int, rng: np.random.Generator) -> np.ndarray:
    n = x.shape[0]
    centers = [x[rng.integers(n)]]
    closest = _sq_dists(x, centers[0][None])[:, 0]
    for _ in range(1, k):
        total = closest.sum()
        if total <= 0:
            raise ValueError(f"fewer than k={k} distinct points; cannot seed distinct centroids")
        idx = rng.choice(n, p=closest / total)
        centers.append(x[idx])
        closest = np.minimum(closest, _sq_dists(x, x[idx][None])[:, 0])
    return np.array(centers)


def kmeans_fit(features: np.ndarray, k: int, seed: int = 0, max_iter: int = 100) -> Codebook:
    """Lloyd's algorithm from k-means++ seeds.

    Stops once assignments no longer change or after ``max_iter`` rounds. An
    emptied cluster is re-seeded at the point farthest from its centroid.
    """
    x = np.asarray(features, dtype=np.float64)
    if x.ndim != 2:
        raise ValueError(f"features must be N x d, got shape {x.shape}")
    if k < 2:
        raise ValueError(f"k must be at least 2, got {k}")
    if x.shape[0] < k:
        raise ValueError(f"need at least k={k} points, got {x.shape[0]}")
    rng = np.random.default_rng(seed)
    centroids = _kmeanspp(x, k, rng)
    assign = None
    history: list[float] = []
    it = 0
    for it in range(1, max_iter + 1):
        dists = _sq_dists(x, centroids)
        new_assign = dists.argmin(axis=1)
        point_d = dists[np.arange(x.shape[0]), new_assign]
        history.append(float(point_d.sum()))
        if assign is not None and np.array_equal(new_assign, assign):
            break
        assign = new_assign
        for j in range(k):
            members = assign == j
            if members.any():
                centroids[j] = x[members].mean(axis=0)
            else:
                far = int(point_d.argmax())
                centroids[j] = x[far]
                assign[far] = j
                point_d[far] = 0.0
    dists = _sq_dists(x, centroids)
    inertia = float(dists.min(axis=1).sum())
    if inertia < history[-1]:
        history.append(inertia)
    return Codebook(centroids, fit_seed=seed, iterations_run=it, inertia=inertia, inertia_history=history)


# -- token pipeline ---------------------------------------------------------


def tokenize(features: np.ndarray, codebook: Codebook) -> np.ndarray:
    """Nearest-centroid index per frame; ties go to the lowest index."""
    x = np.asarray(features, dtype=np.float64)
    if x.ndim != 2 or x.shape[1] != codebook.dim:
        raise ValueError(f"features shape {x.shape} does not match codebook dim {codebook.dim}")
    return _sq_dists(x, codebook.centroids).argmin(axis=1)


def reindex_tokens(raw: Sequence[int], class_label: int, k: int) -> np.ndarray:
    raw = np.asarray(raw, dtype=np.int64)
    if raw.size and (raw.min() < 0 or raw.max() >= k):
        raise ValueError(f"raw tokens must lie in [0, {k - 1}], got range [{raw.min()}, {raw.max()}]")
    if class_label not in (ND, D):
        raise ValueError(f"class label must be 0 or 1, got {class_label}")
    return raw + 1 + (k if class_label == D else 0)


def collapse(tokens: Iterable[int]) -> list[int]:
    out: list[int] = []
    for t in tokens:
        t = int(t)
        if not out or out[-1] != t:
            out.append(t)
    return out


def required_frames(target: Sequence[int]) -> int:
    """Minimum frames for a CTC path: one per label plus a blank between repeats."""
    repeats = sum(1 for a, b in zip(target, target[1:]) if a == b)
    return len(target) + repeats


@dataclass(frozen=True)
class TokenSequence:
    tokens: tuple[int, ...]
    input_length: int

    def __post_init__(self):
        object.__setattr__(self, "tokens", tuple(int(t) for t in self.tokens))
        if any(a == b for a, b in zip(self.tokens, self.tokens[1:])):
            raise ValueError("token sequence has adjacent duplicates; collapse it first")
        if self.target_length > self.input_length:
            raise CTCInfeasibleError(
                f"target length {self.target_length} exceeds input length {self.input_length}"
            )

    @property
    def target_length(self) -> int:
        return len(self.tokens)


def build_targets(
    features: np.ndarray, codebook: Codebook, class_label: int, pool_stride: int = 1
) -> TokenSequence:
    """Tokenize, shift into the class range, collapse. ``input_length`` counts
    the frames that reach the CTC head after optional pooling."""
    raw = tokenize(features, codebook)
    return targets_from_raw(raw, class_label, codebook.k, pool_stride)


def targets_from_raw(raw: Sequence[int], class_label: int, k: int, pool_stride: int = 1) -> TokenSequence:
    tokens = collapse(reindex_tokens(raw, class_label, k))
    return TokenSequence(tuple(tokens), len(raw) // pool_stride)


def build_targets_many(items, codebook: Codebook, pool_stride: int = 1):
    """Targets for ``(features, class_label)`` pairs. Infeasible pairs come back
    as None; returns ``(targets, excluded_count)``."""
    out, excluded = [], 0
    for features, label in items:
        try:
            out.append(build_targets(features, codebook, label, pool_stride))
        except CTCInfeasibleError:
            out.append(None)
            excluded += 1
    if excluded:
        log.info("excluded %d infeasible CTC target(s)", excluded)
    return out, excluded


# -- loss -------------------------------------------------------------------


def _log_softmax(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max(axis=-1, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=-1, keepdims=True))


def ctc_nll(logits: np.ndarray, target: Sequence[int], blank: int = BLANK) -> tuple[float, np.ndarray]:
    """Negative log-likelihood of ``target`` under per-frame softmax(logits),
    and its exact gradient w.r.t. ``logits`` (T x V)."""
    logits = np.asarray(logits, dtype=np.float64)
    T, V = logits.shape
    target = [int(t) for t in target]
    if any(t == blank or t < 0 or t >= V for t in target):
        raise ValueError(f"target tokens must lie in [1, {V - 1}] excluding blank")
    need = required_frames(target)
    if T < need:
        raise CTCInfeasibleError(f"{T} frames cannot align a target needing {need}")
    lp = _log_softmax(logits)
    ext = np.full(2 * len(target) + 1, blank, dtype=np.int64)
    ext[1::2] = target
    S = ext.size
    skip = np.zeros(S, dtype=bool)
    skip[2:] = (ext[2:] != blank) & (ext[2:] != ext[:-2])
    neg_inf = -np.inf

    alpha = np.full((T, S), neg_inf)
    alpha[0, 0] = lp[0, ext[0]]
    if S > 1:
        alpha[0, 1] = lp[0, ext[1]]
    for t in range(1, T):
        prev = alpha[t - 1]
        acc = prev.copy()
        acc[1:] = np.logaddexp(acc[1:], prev[:-1])
        acc[2:] = np.where(skip[2:], np.logaddexp(acc[2:], prev[:-2]), acc[2:])
        alpha[t] = acc + lp[t, ext]

    # beta excludes the emission at frame t
    beta = np.full((T, S), neg_inf)
    beta[T - 1, S - 1] = 0.0
    if S > 1:
        beta[T - 1, S - 2] = 0.0
    for t in range(T - 2, -1, -1):
        nxt = beta[t + 1] + lp[t + 1, ext]
        acc = nxt.copy()
        acc[:-1] = np.logaddexp(acc[:-1], nxt[1:])
        acc[:-2] = np.where(skip[2:], np.logaddexp(acc[:-2], nxt[2:]), acc[:-2])
        beta[t] = acc

    log_p = alpha[T - 1, S - 1] if S == 1 else np.logaddexp(alpha[T - 1, S - 1], alpha[T - 1, S - 2])
    occ = np.exp(alpha + beta - log_p)
    grad = np.exp(lp)
    for s in range(S):
        grad[:, ext[s]] -= occ[:, s]
    return float(-log_p), grad


def ctc_loss(frame_logits: nk.Tensor, targets, blank: int = BLANK, reduction: str = "sum") -> nk.Tensor:
    """CTC loss as a differentiable primitive.

    ``frame_logits`` is T x V with a single target, or B x T x V with one
    target per batch row. Targets are TokenSequence objects or plain token
    lists. Per-sequence NLLs are averaged over the batch; with
    ``reduction="mean"`` each is first divided by its target length.
    """
    if reduction not in ("sum", "mean"):
        raise ValueError(f"reduction must be 'sum' or 'mean', got {reduction!r}")
    x = nk.as_tensor(frame_logits)
    single = x.ndim == 2
    data = x.data[None] if single else x.data
    targets = [targets] if single else list(targets)
    if len(targets) != data.shape[0]:
        raise ValueError(f"{len(targets)} targets for batch of {data.shape[0]}")
    total = 0.0
    grad = np.zeros_like(data, dtype=np.float64)
    for b, tgt in enumerate(targets):
        toks = tgt.tokens if isinstance(tgt, TokenSequence) else tgt
        value, g = ctc_nll(data[b], toks, blank)
        norm = 1.0 / max(len(toks), 1) if reduction == "mean" else 1.0
        total += value * norm
        grad[b] = g * norm
    scale = 1.0 / data.shape[0]
    grad = (grad * scale).astype(x.data.dtype)
    if single:
        grad = grad[0]
    return nk.record(np.asarray(total * scale), (x,), lambda g: (g * grad,), "ctc_loss")


def ctc_brute_force(frame_probs: np.ndarray, target: Sequence[int], blank: int = BLANK) -> float:
    """Probability of ``target`` by summing over every frame-label path whose
    collapse (merge repeats, drop blanks) equals it. Test oracle only."""
    probs = np.asarray(frame_probs, dtype=np.float64)
    T, V = probs.shape
    if T > 8 or V > 5:
        raise ValueError(f"enumeration guard exceeded: T={T} (max 8), V={V} (max 5)")
    target = tuple(int(t) for t in target)
    total = 0.0
    for path in itertools.product(range(V), repeat=T):
        if tuple(t for t in collapse(path) if t != blank) == target:
            total += math.prod(probs[t, s] for t, s in enumerate(path))
    return total
