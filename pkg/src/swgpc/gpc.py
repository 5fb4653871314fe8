"""Generalized pairwise comparisons: pair scoring and win statistics."""

from __future__ import annotations

import math
from collections.abc import Iterable, Sequence
from dataclasses import dataclass
from itertools import combinations

import numpy as np
import pandas as pd

from .design import Dataset, EndpointHierarchy

CLUSTER_PERIOD_COLUMNS = ["cluster", "sequence", "j1", "j2", "n_pairs", "n_win", "n_loss",
                          "n_tie", "log_wo", "dx", "dj", "corrected"]


class NoComparisonsError(ValueError):
    """A comparison group was empty."""


def _level_scores(a: np.ndarray, b: np.ndarray, spec) -> np.ndarray:
    diff = a - b
    if spec.kind == "continuous" and spec.tie_threshold:
        diff = np.where(np.abs(diff) <= spec.tie_threshold, 0.0, diff)
    return (np.sign(diff) * spec.sign).astype(np.int8)


def score_pairs(a: np.ndarray, b: np.ndarray, hierarchy: EndpointHierarchy) -> np.ndarray:
    """Hierarchical comparison of rows of ``a`` against rows of ``b``.

    ``a`` and ``b`` are broadcast-compatible arrays whose last axis runs over
    the endpoints. Returns +1 where the ``a`` member wins at the first level
    that separates the pair, -1 where it loses and 0 for neutral pairs.
    """
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    M = len(hierarchy)
    if a.shape[-1] != M or b.shape[-1] != M:
        raise ValueError(f"outcome vectors must have length {M}")
    out = None
    for m, spec in enumerate(hierarchy.specs):
        s = _level_scores(a[..., m], b[..., m], spec)
        out = s if out is None else np.where(out == 0, s, out)
    return out


def compare_pair(a: Sequence[float], b: Sequence[float], hierarchy: EndpointHierarchy) -> int:
    """Score a single pair: +1 favourable to ``a``, -1 unfavourable, 0 neutral."""
    a, b = np.asarray(a, dtype=float), np.asarray(b, dtype=float)
    if a.shape != (len(hierarchy),) or b.shape != a.shape:
        raise ValueError(f"outcome vectors must have length {len(hierarchy)}")
    for m, spec in enumerate(hierarchy.specs):
        s = int(_level_scores(a[m], b[m], spec))
        if s:
            return s
    return 0


def score_matrix(a: np.ndarray, b: np.ndarray, hierarchy: EndpointHierarchy) -> np.ndarray:
    """``(len(a), len(b))`` matrix of pair scores, first argument from ``a``."""
    a = np.asarray(a, dtype=float).reshape(len(a), -1)
    b = np.asarray(b, dtype=float).reshape(len(b), -1)
    return score_pairs(a[:, None, :], b[None, :, :], hierarchy)


@dataclass(frozen=True)
class WinStats:
    """Win/loss/tie counts of group A against group B.

    When either half-tie-adjusted count is zero, 0.5 is added to both before
    forming the win odds so its logarithm stays finite (``corrected`` set).
    """

    n_win: int
    n_loss: int
    n_tie: int

    @property
    def n_pairs(self) -> int:
        return self.n_win + self.n_loss + self.n_tie

    @property
    def corrected(self) -> bool:
        return self.n_win + 0.5 * self.n_tie == 0 or self.n_loss + 0.5 * self.n_tie == 0

    def _num_den(self) -> tuple[float, float]:
        num = self.n_win + 0.5 * self.n_tie
        den = self.n_loss + 0.5 * self.n_tie
        if num == 0 or den == 0:
            num, den = num + 0.5, den + 0.5
        return num, den

    @property
    def wo(self) -> float:
        num, den = self._num_den()
        return num / den

    @property
    def log_wo(self) -> float:
        num, den = self._num_den()
        return math.log(num) - math.log(den)

    @property
    def wr(self) -> float:
        if self.n_loss == 0:
            return math.inf if self.n_win else math.nan
        return self.n_win / self.n_loss

    @property
    def ntb(self) -> float:
        wo = self.wo
        return (wo - 1) / (wo + 1)

    @property
    def prob_index(self) -> float:
        """P(A better) + 0.5 P(tie), from the raw counts."""
        return (self.n_win + 0.5 * self.n_tie) / self.n_pairs

    def swapped(self) -> WinStats:
        return WinStats(self.n_loss, self.n_win, self.n_tie)

    @classmethod
    def from_scores(cls, scores: np.ndarray) -> WinStats:
        scores = np.asarray(scores)
        n_win = int(np.count_nonzero(scores == 1))
        n_loss = int(np.count_nonzero(scores == -1))
        return cls(n_win, n_loss, int(scores.size) - n_win - n_loss)


def win_stats(group_a: np.ndarray, group_b: np.ndarray, hierarchy: EndpointHierarchy) -> WinStats:
    """Compare every member of ``group_a`` with every member of ``group_b``."""
    if len(group_a) == 0 or len(group_b) == 0:
        raise NoComparisonsError("both groups need at least one individual")
    return WinStats.from_scores(score_matrix(group_a, group_b, hierarchy))


def pooled_log_wo(per_stratum: Iterable[tuple[WinStats | None, float]]) -> tuple[float, np.ndarray]:
    """Weighted mean of stratum log win odds.

    Strata without comparisons (``None`` stats) or with zero weight are dropped
    before the weights are normalised. Returns the pooled value and the
    normalised weights of the retained strata, in input order.
    """
    kept = []
    for stats, w in per_stratum:
        if w < 0:
            raise ValueError("stratum weights must be non-negative")
        if stats is not None and stats.n_pairs > 0 and w > 0:
            kept.append((stats.log_wo, float(w)))
    if not kept:
        raise NoComparisonsError("no stratum has comparisons and positive weight")
    logs = np.array([x for x, _ in kept])
    w = np.array([w for _, w in kept])
    w = w / w.sum()
    return float(np.dot(w, logs)), w


def cluster_period_table(dataset: Dataset) -> pd.DataFrame:
    """Win statistics of period ``j2`` against period ``j1 < j2`` within each cluster.

    One row per (cluster, j1, j2) with both cells non-empty, sorted by
    ``(cluster, j1, j2)``. ``log_wo > 0`` means the later period did better.
    The number of dropped (empty-cell) combinations is kept in
    ``df.attrs["n_dropped"]``.
    """
    design = dataset.design
    X = design.treatment_matrix()
    cells = dataset.cell_slices()
    rows = []
    dropped = 0
    for k in design.clusters:
        seq = design.sequence_of_cluster[k]
        present = [j for j in design.periods if (k, j) in cells]
        dropped += math.comb(design.num_periods, 2) - math.comb(len(present), 2)
        if len(present) < 2:
            continue
        lo = cells[(k, present[0])].start
        hi = cells[(k, present[-1])].stop
        block = dataset.outcomes[lo:hi]
        S = score_matrix(block, block, dataset.hierarchy)
        for j1, j2 in combinations(present, 2):
            s1, s2 = cells[(k, j1)], cells[(k, j2)]
            st = WinStats.from_scores(S[s2.start - lo:s2.stop - lo, s1.start - lo:s1.stop - lo])
            rows.append((k, seq, j1, j2, st.n_pairs, st.n_win, st.n_loss, st.n_tie,
                         st.log_wo, int(X[k - 1, j2 - 1] - X[k - 1, j1 - 1]), j2 - j1,
                         st.corrected))
    df = pd.DataFrame(rows, columns=CLUSTER_PERIOD_COLUMNS)
    df.attrs["n_dropped"] = dropped
    return df
