"""Centroid usage statistics and per-centroid chi-square tests.

Frames are pooled across subjects within each group. For centroid j the 2x2
table is::

                 at j    elsewhere
    depressed     a         b
    control       c         d

and the test has one degree of freedom with no continuity correction.
"""

from __future__ import annotations

import csv
import math
import warnings
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

GROUP_NAMES = {0: "ND", 1: "D"}
REPORT_COLUMNS = ("id", "diff", "chi2", "p", "flag")


class UndefinedTestError(ValueError):
    """A 2x2 table with an empty row or column."""


class ExpectedCountWarning(UserWarning):
    pass


def _group_key(key) -> int:
    if key in (0, "0", "ND", "nd", "control"):
        return 0
    if key in (1, "1", "D", "d", "depressed"):
        return 1
    raise ValueError(f"unknown group {key!r}; expected 0/ND or 1/D")


def chi2_sf_df1(statistic: float) -> float:
    """Upper tail of the chi-square distribution with one degree of freedom."""
    if statistic < 0:
        raise ValueError(f"chi-square statistic must be >= 0, got {statistic}")
    return math.erfc(math.sqrt(statistic / 2.0))


def chi_square_2x2(a, b=None, c=None, d=None, *, warn: bool = True) -> tuple[float, float]:
    """Pearson chi-square for a 2x2 table, given as four counts or [[a, b], [c, d]].

    Warns (does not fail) when an expected count is below 5.
    """
    if b is None:
        (a, b), (c, d) = a
    counts = [a, b, c, d]
    if any(x < 0 for x in counts):
        raise ValueError(f"counts must be nonnegative, got {counts}")
    a, b, c, d = (int(x) for x in counts)
    row1, row2, col1, col2 = a + b, c + d, a + c, b + d
    if 0 in (row1, row2, col1, col2):
        raise UndefinedTestError(f"table [[{a}, {b}], [{c}, {d}]] has a zero marginal")
    n = row1 + row2
    if warn:
        smallest = min(r * k for r in (row1, row2) for k in (col1, col2)) / n
        if smallest < 5:
            warnings.warn(
                f"expected count {smallest:.3g} < 5 in table [[{a}, {b}], [{c}, {d}]]",
                ExpectedCountWarning,
                stacklevel=2,
            )
    # integer numerator keeps the statistic exact for moderate counts
    stat = n * (a * d - b * c) ** 2 / (row1 * row2 * col1 * col2)
    return float(stat), chi2_sf_df1(stat)


@dataclass
class CentroidUsage:
    counts: np.ndarray  # (2, k) frame counts, row 0 = ND, row 1 = D
    frequencies: np.ndarray  # (2, k)
    difference: np.ndarray  # (k,) freq_D - freq_ND
    chi2: np.ndarray  # (k,), nan when the centroid is unused by both groups
    p_value: np.ndarray  # (k,)
    low_expected: list[int] = field(default_factory=list)

    @property
    def k(self) -> int:
        return self.counts.shape[1]


def usage_stats(token_frames_by_group: Mapping, k: int | None = None, warn: bool = False) -> CentroidUsage:
    """Per-group centroid frequencies, D - ND differences and chi-square tests.

    ``token_frames_by_group`` maps the control group (0 or "ND") and the
    depressed group (1 or "D") to sequences of raw centroid indices; nested
    per-segment sequences are flattened.
    """
    groups: dict[int, np.ndarray] = {}
    for key, frames in token_frames_by_group.items():
        flat = [np.asarray(f, dtype=np.int64).ravel() for f in frames] if _is_nested(frames) else [np.asarray(frames, dtype=np.int64).ravel()]
        groups[_group_key(key)] = np.concatenate(flat) if flat else np.zeros(0, dtype=np.int64)
    for g in (0, 1):
        if g not in groups or groups[g].size == 0:
            raise ValueError(f"group {GROUP_NAMES[g]} is missing or has no frames")
    top = max(int(v.max()) for v in groups.values()) + 1
    k = top if k is None else k
    if any(v.min() < 0 or v.max() >= k for v in groups.values()):
        raise ValueError(f"centroid indices must lie in [0, {k - 1}]")
    counts = np.stack([np.bincount(groups[g], minlength=k) for g in (0, 1)])
    totals = counts.sum(axis=1, keepdims=True)
    freqs = counts / totals
    chi2 = np.full(k, np.nan)
    pval = np.full(k, np.nan)
    low = []
    for j in range(k):
        a, c = int(counts[1, j]), int(counts[0, j])
        b, d = int(totals[1, 0]) - a, int(totals[0, 0]) - c
        try:
            with warnings.catch_warnings(record=True) as caught:
                warnings.simplefilter("always", ExpectedCountWarning)
                chi2[j], pval[j] = chi_square_2x2(a, b, c, d)
            if caught:
                low.append(j)
        except UndefinedTestError:
            continue
    if warn and low:
        warnings.warn(f"expected count < 5 for centroids {low}", ExpectedCountWarning, stacklevel=2)
    return CentroidUsage(counts, freqs, freqs[1] - freqs[0], chi2, pval, low)


def _is_nested(frames) -> bool:
    if isinstance(frames, np.ndarray):
        return frames.dtype == object
    return len(frames) > 0 and not np.isscalar(frames[0])


@dataclass
class AnalysisConfig:
    alpha: float = 0.05
    bonferroni: bool = False
    sample_size: int | None = 1000  # recordings drawn per analysis; None uses all
    seed: int = 0

    def __post_init__(self):
        if not 0.0 < self.alpha < 1.0:
            raise ValueError(f"alpha must lie in (0, 1), got {self.alpha}")
        if self.sample_size is not None and self.sample_size < 1:
            raise ValueError("sample_size must be positive")


def sample_recordings(items: Sequence, cfg: AnalysisConfig) -> list:
    """A seeded subsample of ``cfg.sample_size`` items, in original order."""
    items = list(items)
    if cfg.sample_size is None or cfg.sample_size >= len(items):
        return items
    pick = np.random.default_rng(cfg.seed).choice(len(items), size=cfg.sample_size, replace=False)
    return [items[i] for i in sorted(pick)]


def significance_report(usage: CentroidUsage, alpha: float = 0.05, bonferroni: bool = False, path=None) -> list[dict]:
    """One row per centroid with columns id, diff, chi2, p, flag.

    A centroid is flagged when p < alpha (alpha / k under Bonferroni).
    Untestable centroids carry empty chi2 and p and are never flagged.
    """
    threshold = alpha / usage.k if bonferroni else alpha
    rows = []
    for j in range(usage.k):
        p = usage.p_value[j]
        rows.append(
            {
                "id": j,
                "diff": float(usage.difference[j]),
                "chi2": None if np.isnan(usage.chi2[j]) else float(usage.chi2[j]),
                "p": None if np.isnan(p) else float(p),
                "flag": bool(not np.isnan(p) and p < threshold),
            }
        )
    if path is not None:
        write_report_csv(rows, path)
    return rows


def write_report_csv(rows: Sequence[dict], path) -> None:
    with Path(path).open("w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(REPORT_COLUMNS)
        for r in rows:
            writer.writerow(
                [
                    r["id"],
                    repr(r["diff"]),
                    "" if r["chi2"] is None else repr(r["chi2"]),
                    "" if r["p"] is None else repr(r["p"]),
                    "*" if r["flag"] else "",
                ]
            )


def null_false_positive_rate(
    trials: int = 500,
    k: int = 5,
    frames_per_group: int = 2000,
    dim: int = 8,
    alpha: float = 0.05,
    seed: int = 0,
) -> float:
    """Fraction of centroid tests flagged when both groups share one distribution.

    Each trial draws fresh standard-normal frames for both groups and
    tokenizes them with one codebook fit on an independent draw.
    """
    from .ctclab import kmeans_fit, tokenize

    rng = np.random.default_rng(seed)
    codebook = kmeans_fit(rng.standard_normal((4000, dim)), k, seed=seed)
    flagged = tested = 0
    for _ in range(trials):
        groups = {g: tokenize(rng.standard_normal((frames_per_group, dim)), codebook) for g in (0, 1)}
        usage = usage_stats(groups, k=k)
        ok = ~np.isnan(usage.p_value)
        tested += int(ok.sum())
        flagged += int((usage.p_value[ok] < alpha).sum())
    return flagged / tested
