"""Simulation of stepped-wedge trial data.

Binary endpoints follow a logistic random-effects model with a persistent
cluster effect and a cluster-period effect whose variances are set from the
(ICC, CAC) pair. The continuous endpoint is Gaussian with the same random
effect structure and is clamped to an admissible range.

Random streams are derived from ``(scenario_seed, replicate_index, ...)``
through :class:`numpy.random.SeedSequence` spawn keys, so each replicate, and
each cell within it, can be regenerated in isolation.
"""

from __future__ import annotations

import math
from collections.abc import Sequence
from dataclasses import dataclass

import numpy as np
from scipy.special import expit, logit

from .design import Dataset, EndpointHierarchy, EndpointSpec, TrialDesign

LOGISTIC_VARIANCE = math.pi ** 2 / 3

# stream kinds in the spawn key
_TIME, _CLUSTER_RE, _PERIOD_RE, _OUTCOME = 0, 1, 2, 3


@dataclass(frozen=True)
class BinaryEndpointParams:
    p0: float
    delta: float = 0.0
    beta_t: float = 0.0
    icc: float = 0.0
    cac: float = 1.0

    def __post_init__(self):
        if not 0 < self.p0 < 1:
            raise ValueError(f"p0 must lie in (0, 1), got {self.p0}")
        _check_icc_cac(self.icc, self.cac)


@dataclass(frozen=True)
class ContinuousEndpointParams:
    mu0: float
    delta: float
    sigma: float
    icc: float = 0.0
    cac: float = 1.0
    lo: float = -math.inf
    hi: float = math.inf

    def __post_init__(self):
        if not self.sigma > 0:
            raise ValueError("sigma must be positive")
        if not self.lo < self.hi:
            raise ValueError("truncation range needs lo < hi")
        _check_icc_cac(self.icc, self.cac)


@dataclass(frozen=True)
class RngSpec:
    scenario_seed: int
    replicate_index: int

    def generator(self, *stream: int) -> np.random.Generator:
        ss = np.random.SeedSequence(self.scenario_seed,
                                    spawn_key=(self.replicate_index, *stream))
        return np.random.Generator(np.random.PCG64(ss))


def _check_icc_cac(icc: float, cac: float) -> None:
    if not 0 <= icc < 1:
        raise ValueError(f"icc must lie in [0, 1), got {icc}")
    if not 0 <= cac <= 1:
        raise ValueError(f"cac must lie in [0, 1], got {cac}")


def variance_components(icc: float, cac: float,
                        residual_var: float = LOGISTIC_VARIANCE) -> tuple[float, float]:
    """Cluster and cluster-period variances giving the requested ICC and CAC."""
    _check_icc_cac(icc, cac)
    if not residual_var > 0:
        raise ValueError("residual_var must be positive")
    total = icc * residual_var / (1 - icc)
    return cac * total, (1 - cac) * total


def icc_roundtrip(sigma2_cluster: float, sigma2_period: float,
                  residual_var: float = LOGISTIC_VARIANCE) -> tuple[float, float | None]:
    """Inverse of :func:`variance_components`.

    Returns ``(icc, cac)``; ``cac`` is ``None`` when both variances are zero.
    """
    if sigma2_cluster < 0 or sigma2_period < 0 or not residual_var > 0:
        raise ValueError("variances must be non-negative and residual_var positive")
    shared = sigma2_cluster + sigma2_period
    if shared == 0:
        return 0.0, None
    return shared / (shared + residual_var), sigma2_cluster / shared


def _cell_layout(design: TrialDesign, n_per_cell: int):
    K, J = design.num_clusters, design.num_periods
    cluster = np.repeat(np.arange(1, K + 1), J * n_per_cell)
    period = np.tile(np.repeat(np.arange(1, J + 1), n_per_cell), K)
    treatment = design.treatment_matrix()[cluster - 1, period - 1]
    return cluster, period, treatment


def simulate_times(design: TrialDesign, n_per_cell: int, rng: RngSpec) -> np.ndarray:
    """Uniform observation times inside each period, one stream per cell."""
    if n_per_cell < 1:
        raise ValueError("n_per_cell must be >= 1")
    out = np.empty(design.num_clusters * design.num_periods * n_per_cell)
    pos = 0
    for k in design.clusters:
        for j in design.periods:
            lo, hi = design.period_bounds[j - 1]
            u = rng.generator(_TIME, k, j).random(n_per_cell)
            out[pos:pos + n_per_cell] = lo + (hi - lo) * u
            pos += n_per_cell
    return out


def _random_effects(design: TrialDesign, s2_cluster: float, s2_period: float,
                    rng: RngSpec, endpoint: int) -> tuple[np.ndarray, np.ndarray]:
    # drawn in id order; counts depend on the design only, never on n
    K, J = design.num_clusters, design.num_periods
    eta = rng.generator(_CLUSTER_RE, endpoint).standard_normal(K) * math.sqrt(s2_cluster)
    zeta = rng.generator(_PERIOD_RE, endpoint).standard_normal((K, J)) * math.sqrt(s2_period)
    return eta, zeta


def _cell_uniforms(design: TrialDesign, n_per_cell: int, rng: RngSpec, endpoint: int,
                   normal: bool = False) -> np.ndarray:
    out = np.empty(design.num_clusters * design.num_periods * n_per_cell)
    pos = 0
    for k in design.clusters:
        for j in design.periods:
            g = rng.generator(_OUTCOME, endpoint, k, j)
            out[pos:pos + n_per_cell] = (g.standard_normal(n_per_cell) if normal
                                         else g.random(n_per_cell))
            pos += n_per_cell
    return out


def binary_column(design: TrialDesign, params: BinaryEndpointParams, n_per_cell: int,
                  rng: RngSpec, time: np.ndarray, endpoint: int = 0) -> np.ndarray:
    cluster, period, treatment = _cell_layout(design, n_per_cell)
    s2c, s2p = variance_components(params.icc, params.cac)
    eta, zeta = _random_effects(design, s2c, s2p, rng, endpoint)
    lin = (logit(params.p0) + params.delta * treatment + eta[cluster - 1]
           + zeta[cluster - 1, period - 1] + params.beta_t * time)
    u = _cell_uniforms(design, n_per_cell, rng, endpoint)
    return (u < expit(lin)).astype(np.float64)


def continuous_column(design: TrialDesign, params: ContinuousEndpointParams, n_per_cell: int,
                      rng: RngSpec, endpoint: int = 0) -> np.ndarray:
    """Gaussian outcome hard-clamped to ``[lo, hi]``.

    Clamping piles mass on the bounds and shifts the mean slightly toward the
    interior when the range is tight.
    """
    cluster, period, treatment = _cell_layout(design, n_per_cell)
    s2c, s2p = variance_components(params.icc, params.cac, params.sigma ** 2)
    u, v = _random_effects(design, s2c, s2p, rng, endpoint)
    mu = params.mu0 + params.delta * treatment + u[cluster - 1] + v[cluster - 1, period - 1]
    y = mu + params.sigma * _cell_uniforms(design, n_per_cell, rng, endpoint, normal=True)
    return np.clip(y, params.lo, params.hi)


EndpointParams = BinaryEndpointParams | ContinuousEndpointParams


def simulate(design: TrialDesign, hierarchy: EndpointHierarchy,
             params: Sequence[EndpointParams], n_per_cell: int, rng: RngSpec) -> Dataset:
    """Simulate every endpoint of ``hierarchy`` with shared observation times.

    Each endpoint gets its own random effects and outcome streams, keyed by its
    position, so truncating the hierarchy leaves the earlier columns intact.
    """
    if len(params) != len(hierarchy):
        raise ValueError("need one parameter set per endpoint")
    cluster, period, treatment = _cell_layout(design, n_per_cell)
    time = simulate_times(design, n_per_cell, rng)
    cols = []
    for m, (p, spec) in enumerate(zip(params, hierarchy.specs)):
        if isinstance(p, BinaryEndpointParams):
            if spec.kind != "binary":
                raise ValueError(f"endpoint {m} is {spec.kind} but got binary parameters")
            cols.append(binary_column(design, p, n_per_cell, rng, time, m))
        else:
            if spec.kind != "continuous":
                raise ValueError(f"endpoint {m} is {spec.kind} but got continuous parameters")
            cols.append(continuous_column(design, p, n_per_cell, rng, m))
    return Dataset(design, hierarchy, cluster, period, time, treatment,
                   np.column_stack(cols), _validated=True)


def simulate_binary(design: TrialDesign, params: BinaryEndpointParams, n_per_cell: int,
                    rng: RngSpec, direction: str = "higher") -> Dataset:
    hierarchy = EndpointHierarchy((("y1", EndpointSpec("binary", direction)),))
    return simulate(design, hierarchy, [params], n_per_cell, rng)


def simulate_continuous(design: TrialDesign, params: ContinuousEndpointParams,
                        n_per_cell: int, rng: RngSpec) -> np.ndarray:
    """Single continuous outcome column in the dataset row order."""
    return continuous_column(design, params, n_per_cell, rng)
