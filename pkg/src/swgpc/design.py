"""Stepped-wedge designs, endpoint hierarchies and trial datasets.

Identifiers are 1-based throughout: clusters ``1..K``, sequences ``1..S`` and
periods ``1..J``, matching the on-disk CSV schema.
"""

from __future__ import annotations

import math
from collections.abc import Iterator, Mapping, Sequence
from dataclasses import dataclass, field
from typing import Literal, NamedTuple

import numpy as np


class DesignError(ValueError):
    """Raised for an invalid design, hierarchy or dataset."""


@dataclass(frozen=True)
class TrialDesign:
    num_clusters: int
    num_periods: int
    num_sequences: int
    sequence_of_cluster: Mapping[int, int]
    switch_period: Mapping[int, int]
    period_bounds: tuple[tuple[float, float], ...]

    def __post_init__(self):
        K, J, S = self.num_clusters, self.num_periods, self.num_sequences
        if K < 1 or J < 2 or S < 1:
            raise DesignError("need K >= 1, J >= 2 and S >= 1")
        if sorted(self.sequence_of_cluster) != list(range(1, K + 1)):
            raise DesignError("sequence_of_cluster must map every cluster 1..K")
        if sorted(self.switch_period) != list(range(1, S + 1)):
            raise DesignError("switch_period must cover every sequence 1..S")
        for k, s in self.sequence_of_cluster.items():
            if s not in self.switch_period:
                raise DesignError(f"cluster {k} maps to unknown sequence {s}")
        for s, j in self.switch_period.items():
            if not 2 <= j <= J:
                raise DesignError(
                    f"sequence {s} switches at period {j}; must be in 2..{J}")
        bounds = self.period_bounds
        if len(bounds) != J:
            raise DesignError(f"expected {J} period bounds, got {len(bounds)}")
        for j, (lo, hi) in enumerate(bounds):
            if not (math.isfinite(lo) and math.isfinite(hi) and lo < hi):
                raise DesignError(f"period {j + 1} has invalid bounds ({lo}, {hi})")
            if j and bounds[j - 1][1] != lo:
                raise DesignError("period bounds must be contiguous")
        # frozen + Mapping fields: store read-only copies
        object.__setattr__(self, "sequence_of_cluster", dict(self.sequence_of_cluster))
        object.__setattr__(self, "switch_period", dict(self.switch_period))
        object.__setattr__(self, "period_bounds",
                           tuple((float(a), float(b)) for a, b in bounds))

    @property
    def clusters(self) -> range:
        return range(1, self.num_clusters + 1)

    @property
    def periods(self) -> range:
        return range(1, self.num_periods + 1)

    def treatment(self, k: int, j: int) -> int:
        """Treatment indicator of cluster ``k`` during period ``j``."""
        return treatment_indicator(self, k, j)

    def treatment_matrix(self) -> np.ndarray:
        """``(K, J)`` 0/1 matrix; row ``k-1``, column ``j-1``."""
        seq = np.array([self.sequence_of_cluster[k] for k in self.clusters])
        switch = np.array([self.switch_period[s] for s in seq])
        return (np.arange(1, self.num_periods + 1)[None, :] >= switch[:, None]).astype(np.int8)

    def to_dict(self) -> dict:
        return {
            "num_clusters": self.num_clusters,
            "num_periods": self.num_periods,
            "num_sequences": self.num_sequences,
            "sequence_of_cluster": {str(k): s for k, s in self.sequence_of_cluster.items()},
            "switch_period": {str(s): j for s, j in self.switch_period.items()},
            "period_bounds": [list(b) for b in self.period_bounds],
        }

    @classmethod
    def from_dict(cls, d: Mapping) -> TrialDesign:
        known = {"num_clusters", "num_periods", "num_sequences",
                 "sequence_of_cluster", "switch_period", "period_bounds"}
        extra = set(d) - known
        if extra:
            raise DesignError(f"unknown design keys: {sorted(extra)}")
        return cls(
            num_clusters=int(d["num_clusters"]),
            num_periods=int(d["num_periods"]),
            num_sequences=int(d["num_sequences"]),
            sequence_of_cluster={int(k): int(v) for k, v in d["sequence_of_cluster"].items()},
            switch_period={int(k): int(v) for k, v in d["switch_period"].items()},
            period_bounds=tuple(tuple(b) for b in d["period_bounds"]),
        )


def unit_period_bounds(J: int) -> tuple[tuple[float, float], ...]:
    return tuple((float(j - 1), float(j)) for j in range(1, J + 1))


def make_uniform_design(K: int, S: int, J: int | None = None,
                        periods: Sequence[tuple[float, float]] | None = None) -> TrialDesign:
    """Balanced stepped wedge: ``K/S`` clusters per sequence, sequence ``s``
    switching at period ``s + 1``.

    Clusters are assigned to sequences in contiguous blocks (clusters
    ``1..K/S`` to sequence 1, and so on). ``periods`` defaults to unit
    intervals ``[j-1, j)``.
    """
    if J is None:
        J = S + 1
    if K < 1 or S < 1 or K % S:
        raise DesignError(f"K={K} is not divisible by S={S}; only balanced designs are supported")
    if J != S + 1:
        raise DesignError(f"a standard stepped wedge with {S} sequences needs J={S + 1}, got {J}")
    per = K // S
    return TrialDesign(
        num_clusters=K,
        num_periods=J,
        num_sequences=S,
        sequence_of_cluster={k: (k - 1) // per + 1 for k in range(1, K + 1)},
        switch_period={s: s + 1 for s in range(1, S + 1)},
        period_bounds=tuple(periods) if periods is not None else unit_period_bounds(J),
    )


def treatment_indicator(design: TrialDesign, k: int, j: int) -> int:
    if k not in design.sequence_of_cluster:
        raise DesignError(f"cluster {k} out of range 1..{design.num_clusters}")
    if not 1 <= j <= design.num_periods:
        raise DesignError(f"period {j} out of range 1..{design.num_periods}")
    return int(j >= design.switch_period[design.sequence_of_cluster[k]])


@dataclass(frozen=True)
class EndpointSpec:
    kind: Literal["binary", "continuous"]
    direction: Literal["higher", "lower"] = "higher"
    tie_threshold: float | None = None

    def __post_init__(self):
        if self.kind not in ("binary", "continuous"):
            raise DesignError(f"unknown endpoint kind {self.kind!r}")
        if self.direction not in ("higher", "lower"):
            raise DesignError(f"direction must be 'higher' or 'lower', got {self.direction!r}")
        if self.kind == "binary" and self.tie_threshold is not None:
            raise DesignError("binary endpoints take no tie threshold")
        if self.kind == "continuous":
            thr = 0.0 if self.tie_threshold is None else float(self.tie_threshold)
            if not thr >= 0:
                raise DesignError("tie_threshold must be >= 0")
            object.__setattr__(self, "tie_threshold", thr)

    @property
    def sign(self) -> int:
        return 1 if self.direction == "higher" else -1


@dataclass(frozen=True)
class EndpointHierarchy:
    """Endpoints in priority order; position 0 is the most important."""

    endpoints: tuple[tuple[str, EndpointSpec], ...]

    def __post_init__(self):
        eps = tuple((str(n), e) for n, e in self.endpoints)
        if not eps:
            raise DesignError("hierarchy must contain at least one endpoint")
        names = [n for n, _ in eps]
        if len(set(names)) != len(names):
            raise DesignError(f"endpoint names must be unique: {names}")
        object.__setattr__(self, "endpoints", eps)

    def __len__(self) -> int:
        return len(self.endpoints)

    @property
    def names(self) -> list[str]:
        return [n for n, _ in self.endpoints]

    @property
    def specs(self) -> list[EndpointSpec]:
        return [e for _, e in self.endpoints]

    def truncate(self, m: int) -> EndpointHierarchy:
        return EndpointHierarchy(self.endpoints[:m])

    def to_dict(self) -> dict:
        return {"endpoints": [
            {"name": n, "kind": e.kind, "direction": e.direction,
             **({"tie_threshold": e.tie_threshold} if e.kind == "continuous" else {})}
            for n, e in self.endpoints]}

    @classmethod
    def from_dict(cls, d: Mapping) -> EndpointHierarchy:
        extra = set(d) - {"endpoints"}
        if extra:
            raise DesignError(f"unknown hierarchy keys: {sorted(extra)}")
        out = []
        for item in d["endpoints"]:
            bad = set(item) - {"name", "kind", "direction", "tie_threshold"}
            if bad:
                raise DesignError(f"unknown endpoint keys: {sorted(bad)}")
            out.append((item["name"], EndpointSpec(
                item["kind"], item.get("direction", "higher"), item.get("tie_threshold"))))
        return cls(tuple(out))


def single_binary(name: str = "y1", direction: str = "higher") -> EndpointHierarchy:
    return EndpointHierarchy(((name, EndpointSpec("binary", direction)),))


class IndividualRecord(NamedTuple):
    cluster_id: int
    period_id: int
    time: float
    treatment: int
    outcomes: tuple[float, ...]


@dataclass(frozen=True, eq=False)
class Dataset:
    """Column-oriented individual-level trial data.

    Rows are kept sorted by ``(cluster, period)`` with a stable within-cell
    order, so row index doubles as the lexicographic pair-orientation key.
    """

    design: TrialDesign
    hierarchy: EndpointHierarchy
    cluster: np.ndarray
    period: np.ndarray
    time: np.ndarray
    treatment: np.ndarray
    outcomes: np.ndarray
    _validated: bool = field(default=False, repr=False)

    def __post_init__(self):
        cluster = np.asarray(self.cluster, dtype=np.int64)
        period = np.asarray(self.period, dtype=np.int64)
        time = np.asarray(self.time, dtype=np.float64)
        treatment = np.asarray(self.treatment, dtype=np.int8)
        outcomes = np.asarray(self.outcomes, dtype=np.float64)
        if outcomes.ndim == 1:
            outcomes = outcomes[:, None]
        n = cluster.shape[0]
        if not (period.shape == time.shape == treatment.shape == (n,)) or outcomes.shape[0] != n:
            raise DesignError("dataset columns have mismatched lengths")
        if outcomes.shape[1] != len(self.hierarchy):
            raise DesignError(
                f"outcome matrix has {outcomes.shape[1]} columns, hierarchy has {len(self.hierarchy)}")
        order = np.lexsort((period, cluster))
        if not np.array_equal(order, np.arange(n)):
            cluster, period, time = cluster[order], period[order], time[order]
            treatment, outcomes = treatment[order], outcomes[order]
        for name, arr in (("cluster", cluster), ("period", period), ("time", time),
                          ("treatment", treatment), ("outcomes", outcomes)):
            arr.setflags(write=False)
            object.__setattr__(self, name, arr)
        if not self._validated:
            self.validate()

    def validate(self) -> None:
        d = self.design
        if self.n and (self.cluster.min() < 1 or self.cluster.max() > d.num_clusters):
            raise DesignError("cluster ids out of range")
        if self.n and (self.period.min() < 1 or self.period.max() > d.num_periods):
            raise DesignError("period ids out of range")
        expected = d.treatment_matrix()[self.cluster - 1, self.period - 1]
        bad = np.flatnonzero(expected != self.treatment)
        if bad.size:
            raise DesignError(f"treatment disagrees with design at row {int(bad[0])}")
        lo = np.array([b[0] for b in d.period_bounds])[self.period - 1]
        hi = np.array([b[1] for b in d.period_bounds])[self.period - 1]
        bad = np.flatnonzero((self.time < lo) | (self.time >= hi))
        if bad.size:
            raise DesignError(f"time outside its period bounds at row {int(bad[0])}")
        if not np.all(np.isfinite(self.outcomes)):
            raise DesignError("outcomes must be finite")

    @property
    def n(self) -> int:
        return int(self.cluster.shape[0])

    @property
    def sequence(self) -> np.ndarray:
        lut = np.zeros(self.design.num_clusters + 1, dtype=np.int64)
        for k, s in self.design.sequence_of_cluster.items():
            lut[k] = s
        return lut[self.cluster]

    def cell_counts(self) -> np.ndarray:
        """``(K, J)`` matrix of per-cell sample sizes ``n_jk``."""
        counts = np.zeros((self.design.num_clusters, self.design.num_periods), dtype=np.int64)
        np.add.at(counts, (self.cluster - 1, self.period - 1), 1)
        return counts

    def cell_slices(self) -> dict[tuple[int, int], slice]:
        """Row slice of every non-empty ``(cluster, period)`` cell."""
        key = self.cluster * (self.design.num_periods + 1) + self.period
        starts = np.flatnonzero(np.r_[True, key[1:] != key[:-1]]) if self.n else np.array([], int)
        ends = np.r_[starts[1:], self.n]
        return {(int(self.cluster[a]), int(self.period[a])): slice(int(a), int(b))
                for a, b in zip(starts, ends)}

    def with_hierarchy(self, m: int) -> Dataset:
        """View restricted to the first ``m`` endpoints of the hierarchy."""
        return Dataset(self.design, self.hierarchy.truncate(m), self.cluster, self.period,
                       self.time, self.treatment, self.outcomes[:, :m], _validated=True)

    def subset(self, mask: np.ndarray) -> Dataset:
        mask = np.asarray(mask)
        return Dataset(self.design, self.hierarchy, self.cluster[mask], self.period[mask],
                       self.time[mask], self.treatment[mask], self.outcomes[mask],
                       _validated=True)

    def records(self) -> Iterator[IndividualRecord]:
        for i in range(self.n):
            yield IndividualRecord(int(self.cluster[i]), int(self.period[i]),
                                   float(self.time[i]), int(self.treatment[i]),
                                   tuple(float(v) for v in self.outcomes[i]))

    @classmethod
    def from_records(cls, design: TrialDesign, hierarchy: EndpointHierarchy,
                     records: Sequence[IndividualRecord]) -> Dataset:
        M = len(hierarchy)
        outcomes = np.array([r.outcomes for r in records], dtype=float).reshape(len(records), M)
        return cls(design, hierarchy,
                   np.array([r.cluster_id for r in records], dtype=np.int64),
                   np.array([r.period_id for r in records], dtype=np.int64),
                   np.array([r.time for r in records], dtype=float),
                   np.array([r.treatment for r in records], dtype=np.int8),
                   outcomes)
