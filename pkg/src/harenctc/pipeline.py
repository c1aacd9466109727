"""Training, subject-level evaluation, cross-validation and metrics."""

from __future__ import annotations

import logging
import math
from dataclasses import asdict, dataclass, field
from typing import Sequence

import numpy as np

from . import ctclab
from . import numkernel as nk
from .dataio import ConfigurationError, Manifest, WeightedSampler, crop_offset
from .model import ModelConfig, ModelParams, forward, init_params
from .objective import LossConfig, combined_loss, ctc_due, focal_loss

log = logging.getLogger(__name__)

SCENARIOS = ("generalization", "upper-bound")


class TrainingError(RuntimeError):
    pass


@dataclass
class TrainConfig:
    batch_size: int = 8
    lr: float = 1e-3
    epochs: int = 30
    seed: int = 0
    weight_decay: float = 1e-4
    loss: LossConfig = field(default_factory=LossConfig)
    crop_frames: int | None = None
    eval_every: int = 1
    scenario: str = "generalization"
    folds: int = 5
    k: int = 5
    kmeans_iter: int = 100
    kmeans_max_frames: int = 50_000

    def __post_init__(self):
        if isinstance(self.loss, dict):
            self.loss = LossConfig(**self.loss)
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if not self.lr > 0:
            raise ValueError("learning rate must be positive")
        if self.scenario not in SCENARIOS:
            raise ValueError(f"scenario must be one of {SCENARIOS}, got {self.scenario!r}")


# -- data -------------------------------------------------------------------


@dataclass
class Segment:
    segment_id: str
    subject_id: str
    label: int
    layers: np.ndarray  # (m, T, d)
    tok: np.ndarray  # (T, d_tok)
    raw_tokens: np.ndarray | None = None  # (T,) codebook indices


def load_segments(manifest: Manifest) -> list[Segment]:
    out = []
    for ref in manifest.records:
        stack, tok = manifest.load_segment(ref)
        out.append(Segment(ref.segment_id, ref.subject_id, ref.label, stack.layers, tok))
    return out


def fit_codebook(segments: Sequence[Segment], k: int, seed: int, max_iter: int = 100, max_frames: int = 50_000):
    """K-means over the pooled tokenization frames of ``segments``."""
    frames = np.concatenate([s.tok for s in segments]).astype(np.float64)
    if frames.shape[0] < k:
        raise ValueError(f"k={k} exceeds the {frames.shape[0]} available frames")
    if frames.shape[0] > max_frames:
        pick = np.random.default_rng(seed).choice(frames.shape[0], size=max_frames, replace=False)
        frames = frames[np.sort(pick)]
    return ctclab.kmeans_fit(frames, k, seed=seed, max_iter=max_iter)


def attach_tokens(segments: Sequence[Segment], codebook: ctclab.Codebook) -> None:
    for s in segments:
        s.raw_tokens = ctclab.tokenize(s.tok, codebook)


# -- metrics ----------------------------------------------------------------


def aggregate_subject(segment_probs: Sequence[float]) -> tuple[float, int]:
    """Mean segment probability and its thresholded class (>= 0.5 -> 1)."""
    probs = [float(p) for p in segment_probs]
    if not probs:
        raise ValueError("cannot aggregate an empty segment list")
    mean = math.fsum(probs) / len(probs)
    return mean, int(mean >= 0.5)


def _safe_div(a: float, b: float) -> float:
    return a / b if b else 0.0


@dataclass
class MetricsReport:
    macro_f1: float
    macro_recall: float
    macro_precision: float
    confusion: list[list[int]]  # rows true class (0, 1), columns predicted
    per_class: dict = field(default_factory=dict)
    per_fold: list[dict] = field(default_factory=list)
    mean: dict = field(default_factory=dict)
    sd: dict = field(default_factory=dict)
    subject_probs: dict = field(default_factory=dict)
    best_epoch: int | None = None

    def to_dict(self) -> dict:
        return asdict(self)


def compute_metrics(preds: Sequence[int], labels: Sequence[int]) -> MetricsReport:
    preds, labels = list(map(int, preds)), list(map(int, labels))
    if len(preds) != len(labels):
        raise ValueError(f"{len(preds)} predictions for {len(labels)} labels")
    if any(y not in (0, 1) for y in labels) or any(p not in (0, 1) for p in preds):
        raise ValueError("labels and predictions must be binary")
    conf = [[0, 0], [0, 0]]
    for p, y in zip(preds, labels):
        conf[y][p] += 1
    per_class = {}
    for c in (0, 1):
        tp = conf[c][c]
        fp = conf[1 - c][c]
        fn = conf[c][1 - c]
        precision = _safe_div(tp, tp + fp)
        recall = _safe_div(tp, tp + fn)
        f1 = _safe_div(2 * precision * recall, precision + recall)
        per_class[str(c)] = {"precision": precision, "recall": recall, "f1": f1}
    macro = {m: (per_class["0"][m] + per_class["1"][m]) / 2 for m in ("precision", "recall", "f1")}
    return MetricsReport(macro["f1"], macro["recall"], macro["precision"], conf, per_class)


def roc_points(probs: Sequence[float], labels: Sequence[int]) -> list[tuple[float, float, float]]:
    """(threshold, false-positive rate, true-positive rate), thresholds descending."""
    probs = np.asarray(probs, dtype=np.float64)
    labels = np.asarray(labels)
    pos, neg = max(int((labels == 1).sum()), 1), max(int((labels == 0).sum()), 1)
    points = [(math.inf, 0.0, 0.0)]
    for thr in sorted(set(probs.tolist()), reverse=True):
        pred = probs >= thr
        points.append((thr, float((pred & (labels == 0)).sum() / neg), float((pred & (labels == 1)).sum() / pos)))
    return points


def stratified_kfold(subjects: Sequence[tuple[str, int]], folds: int = 5, seed: int = 0) -> dict[str, int]:
    """Assign each subject to a fold, dealing each shuffled class round-robin.

    Per-fold class counts differ by at most one from proportional, and the
    second class continues the deal where the first stopped so fold sizes
    stay balanced too.
    """
    by_class: dict[int, list[str]] = {0: [], 1: []}
    for sid, label in subjects:
        by_class[int(label)].append(sid)
    for label, ids in by_class.items():
        if len(ids) < folds:
            raise ConfigurationError(f"class {label} has {len(ids)} subjects, fewer than {folds} folds")
    rng = np.random.default_rng(seed)
    assignment: dict[str, int] = {}
    cursor = 0
    for label in (0, 1):
        ids = sorted(by_class[label])
        for sid in (ids[i] for i in rng.permutation(len(ids))):
            assignment[sid] = cursor % folds
            cursor += 1
    return assignment


def mean_sd(values: Sequence[float]) -> tuple[float, float]:
    """Mean and sample standard deviation (n-1); sd is 0 for a single value."""
    vals = np.asarray(values, dtype=np.float64)
    mu = float(vals.mean())
    sd = float(vals.std(ddof=1)) if vals.size > 1 else 0.0
    return mu, sd


# -- training ---------------------------------------------------------------


@dataclass
class History:
    epoch_focal: list[float] = field(default_factory=list)
    epoch_ctc: list[float] = field(default_factory=list)
    batch_focal: list[float] = field(default_factory=list)
    batch_ctc: list[float | None] = field(default_factory=list)
    ctc_excluded: int = 0
    eval_f1: list[float] = field(default_factory=list)


def _batch_loss(batch, params, model_cfg, train_cfg, batch_index, rng, history):
    """Loss over a list of (layers, raw_tokens, label) crops, grouped by length."""
    groups: dict[int, list] = {}
    for item in batch:
        groups.setdefault(item[0].shape[1], []).append(item)
    focal_total, ctc_terms, ctc_items = None, [], 0
    want_ctc = ctc_due(batch_index, train_cfg.loss)
    for _, items in sorted(groups.items()):
        stacks = np.stack([it[0] for it in items])
        labels = np.array([it[2] for it in items])
        out = forward(stacks, params, model_cfg, training=True, rng=rng)
        f = focal_loss(out.probability, labels, train_cfg.loss)
        focal_total = f if focal_total is None else nk.add(focal_total, f)
        if not want_ctc:
            continue
        rows, targets = [], []
        for i, (_, raw, label) in enumerate(items):
            try:
                targets.append(ctclab.targets_from_raw(raw, label, model_cfg.k, model_cfg.ctc_pool_stride))
                rows.append(i)
            except ctclab.CTCInfeasibleError:
                history.ctc_excluded += 1
        if rows:
            logits = out.frame_logits if len(rows) == len(items) else nk.take(out.frame_logits, np.array(rows))
            ctc_terms.append((ctclab.ctc_loss(logits, targets, reduction=train_cfg.loss.ctc_reduction), len(rows)))
            ctc_items += len(rows)
    ctc_total = None
    for term, n in ctc_terms:
        weighted = nk.mul(term, n / ctc_items)
        ctc_total = weighted if ctc_total is None else nk.add(ctc_total, weighted)
    return focal_total, ctc_total


def train(
    segments: Sequence[Segment],
    params: ModelParams,
    model_cfg: ModelConfig,
    cfg: TrainConfig,
    eval_fn=None,
) -> History:
    """Weighted sampling, cropping, focal loss every batch, CTC every
    ``ctc_every_n_batches``-th batch, Adam. ``eval_fn(epoch)`` runs after each
    ``eval_every`` epochs and its return value is recorded."""
    if not segments:
        raise ConfigurationError("no training segments")
    if any(s.raw_tokens is None for s in segments) and cfg.loss.ctc_weight > 0:
        raise ConfigurationError("segments need CTC tokens; call attach_tokens first")
    sampler = WeightedSampler([s.label for s in segments], seed=cfg.seed)
    rng = np.random.default_rng(cfg.seed + 1)
    state = nk.AdamState(lr=cfg.lr, weight_decay=cfg.weight_decay)
    trainables = params.trainables()
    history = History()
    per_epoch = len(segments)
    batch_index = 0
    for epoch in range(1, cfg.epochs + 1):
        order = sampler.draw(per_epoch)
        focal_sum, ctc_vals = 0.0, []
        for start in range(0, per_epoch, cfg.batch_size):
            batch = []
            for idx in order[start : start + cfg.batch_size]:
                seg = segments[idx]
                n = seg.layers.shape[1]
                crop = cfg.crop_frames or n
                off = crop_offset(n, crop, rng)
                end = off + min(crop, n)
                raw = seg.raw_tokens[off:end] if seg.raw_tokens is not None else None
                batch.append((seg.layers[:, off:end], raw, seg.label))
            batch_index += 1
            focal, ctc = _batch_loss(batch, params, model_cfg, cfg, batch_index, rng, history)
            loss = combined_loss(focal, ctc, batch_index, cfg.loss)
            if not np.isfinite(loss.item()):
                raise TrainingError(
                    f"non-finite loss at epoch {epoch}, batch {batch_index}: focal={focal.item()}, "
                    f"ctc={None if ctc is None else ctc.item()}"
                )
            params.zero_grad()
            nk.backward(loss, trainables)
            nk.adam_step(trainables, state)
            focal_sum += focal.item()
            history.batch_focal.append(focal.item())
            history.batch_ctc.append(None if ctc is None else ctc.item())
            if ctc is not None:
                ctc_vals.append(ctc.item())
        history.epoch_focal.append(focal_sum / per_epoch)
        history.epoch_ctc.append(float(np.mean(ctc_vals)) if ctc_vals else float("nan"))
        if eval_fn is not None and epoch % cfg.eval_every == 0:
            history.eval_f1.append(eval_fn(epoch))
    return history


def predict_segments(segments: Sequence[Segment], params: ModelParams, model_cfg: ModelConfig, batch_size: int = 32):
    probs = []
    by_len: dict[int, list[int]] = {}
    for i, s in enumerate(segments):
        by_len.setdefault(s.layers.shape[1], []).append(i)
    out = np.zeros(len(segments))
    for _, idx in sorted(by_len.items()):
        for start in range(0, len(idx), batch_size):
            chunk = idx[start : start + batch_size]
            stacks = np.stack([segments[i].layers for i in chunk])
            out[chunk] = forward(stacks, params, model_cfg, training=False).probability.data
    probs = out.tolist()
    return probs


def evaluate_subjects(segments: Sequence[Segment], params: ModelParams, model_cfg: ModelConfig):
    """Subject-level report from confidence-weighted (mean probability) voting."""
    probs = predict_segments(segments, params, model_cfg)
    per_subject: dict[str, list[float]] = {}
    labels: dict[str, int] = {}
    for seg, p in zip(segments, probs):
        per_subject.setdefault(seg.subject_id, []).append(p)
        labels[seg.subject_id] = seg.label
    ids = sorted(per_subject)
    agg = {sid: aggregate_subject(per_subject[sid]) for sid in ids}
    report = compute_metrics([agg[s][1] for s in ids], [labels[s] for s in ids])
    report.subject_probs = {sid: agg[sid][0] for sid in ids}
    return report, {sid: labels[sid] for sid in ids}


# -- scenarios --------------------------------------------------------------


@dataclass
class ScenarioResult:
    report: MetricsReport
    histories: list[History]
    labels: dict[str, int]
    codebooks: list[ctclab.Codebook] = field(default_factory=list)
    params: list[ModelParams] = field(default_factory=list)


def _prepare(train_segs, cfg: TrainConfig, model_cfg: ModelConfig, seed: int):
    codebook = None
    if cfg.loss.ctc_weight > 0:
        codebook = fit_codebook(train_segs, model_cfg.k, seed, cfg.kmeans_iter, cfg.kmeans_max_frames)
    return codebook


def train_and_evaluate(train_segs, eval_segs, model_cfg: ModelConfig, cfg: TrainConfig, select_best: bool = False):
    """Fit a codebook on ``train_segs``, train, and score ``eval_segs``.

    With ``select_best`` the model is scored after every ``eval_every`` epochs
    and the epoch with the highest macro F1 is reported.
    """
    codebook = _prepare(train_segs, cfg, model_cfg, cfg.seed)
    if codebook is not None:
        attach_tokens(train_segs, codebook)
        attach_tokens(eval_segs, codebook)
    params = init_params(model_cfg, seed=cfg.seed)
    best = {"f1": -1.0, "report": None, "labels": None, "state": None}

    def eval_fn(epoch):
        report, labels = evaluate_subjects(eval_segs, params, model_cfg)
        if report.macro_f1 > best["f1"]:
            report.best_epoch = epoch
            best.update(f1=report.macro_f1, report=report, labels=labels, state=params.state_dict())
        return report.macro_f1

    history = train(train_segs, params, model_cfg, cfg, eval_fn if select_best else None)
    if select_best:
        params.load_state_dict(best["state"])
        return best["report"], best["labels"], history, codebook, params
    report, labels = evaluate_subjects(eval_segs, params, model_cfg)
    report.best_epoch = cfg.epochs
    return report, labels, history, codebook, params


_METRIC_KEYS = ("macro_f1", "macro_recall", "macro_precision")


def run_scenario(manifest: Manifest, model_cfg: ModelConfig, cfg: TrainConfig, segments=None) -> ScenarioResult:
    segments = segments if segments is not None else load_segments(manifest)
    if cfg.scenario == "upper-bound":
        train_segs = [s for s, r in zip(segments, manifest.records) if r.split == "train"]
        dev_segs = [s for s, r in zip(segments, manifest.records) if r.split == "dev"]
        if not train_segs or not dev_segs:
            raise ConfigurationError("upper-bound scenario needs 'train' and 'dev' split tags in the manifest")
        report, labels, hist, cb, params = train_and_evaluate(train_segs, dev_segs, model_cfg, cfg, select_best=True)
        report.per_fold = [{k: getattr(report, k) for k in _METRIC_KEYS} | {"fold": 0, "best_epoch": report.best_epoch}]
        report.mean = {k: getattr(report, k) for k in _METRIC_KEYS}
        report.sd = {k: 0.0 for k in _METRIC_KEYS}
        return ScenarioResult(report, [hist], labels, [cb] if cb else [], [params])

    subjects = sorted({(s.subject_id, s.label) for s in segments})
    folds = stratified_kfold(subjects, cfg.folds, cfg.seed)
    per_fold, histories, codebooks, all_params = [], [], [], []
    probs: dict[str, float] = {}
    labels: dict[str, int] = {}
    for fold in range(cfg.folds):
        train_segs = [s for s in segments if folds[s.subject_id] != fold]
        test_segs = [s for s in segments if folds[s.subject_id] == fold]
        fold_cfg = TrainConfig(**{**asdict(cfg), "loss": cfg.loss, "seed": cfg.seed + 1000 * fold})
        report, fold_labels, hist, cb, params = train_and_evaluate(train_segs, test_segs, model_cfg, fold_cfg)
        log.info("fold %d macro F1 %.4f", fold, report.macro_f1)
        per_fold.append({"fold": fold} | {k: getattr(report, k) for k in _METRIC_KEYS})
        probs.update(report.subject_probs)
        labels.update(fold_labels)
        histories.append(hist)
        all_params.append(params)
        if cb is not None:
            codebooks.append(cb)
    ids = sorted(probs)
    pooled = compute_metrics([int(probs[s] >= 0.5) for s in ids], [labels[s] for s in ids])
    pooled.subject_probs = {s: probs[s] for s in ids}
    pooled.per_fold = per_fold
    for key in _METRIC_KEYS:
        pooled.mean[key], pooled.sd[key] = mean_sd([f[key] for f in per_fold])
    return ScenarioResult(pooled, histories, labels, codebooks, all_params)
