"""Replicated simulation scenarios and their operating characteristics."""

from __future__ import annotations

import itertools
import logging
import math
import os
import zlib
from collections.abc import Callable, Iterable, Sequence
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field

import numpy as np
import pandas as pd
from scipy.special import expit, logit

from .datagen import (BinaryEndpointParams, ContinuousEndpointParams, EndpointParams, RngSpec,
                      simulate)
from .design import (Dataset, EndpointHierarchy, EndpointSpec, TrialDesign,
                     make_uniform_design)
from .estimators import METHODS, MethodError, run_method

log = logging.getLogger(__name__)

ALPHA = 0.05

RESULT_COLUMNS = ["scenario_label", "p0", "icc", "cac", "beta_t", "delta", "method",
                  "endpoint_set", "n_reps", "rejections", "rejection_rate", "mcse",
                  "mean_delta_hat", "sd_delta_hat", "n_fail"]

GRID_P0 = (0.01, 0.1, 0.2, 0.5)
GRID_ICC = (0.0, 0.05, 0.1, 0.3)
GRID_CAC = (0.5, 0.75, 0.9, 1.0)
GRID_BETA_T = (-0.05, -0.025, 0.0, 0.025, 0.05)
GRID_DELTA = (0.0, 0.25, 0.5, 1.0, 1.5)

ETHER_ICC = (0.01, 0.03, 0.05, 0.10)
ETHER_CAC = (0.5, 0.75, 0.9, 1.0)
ETHER_BETA_T = GRID_BETA_T
# (name, p0, log-odds effect); events are harms, so lower is favourable
ETHER_BINARY = (("death", 0.10, -0.117), ("vte", 0.066, -0.674), ("bleeding", 0.070, -0.816))
ETHER_PAM = dict(mu0=62.6, delta=5.0, sigma=13.6, lo=0.0, hi=100.0, tie=5.4)
ETHER_METHODS = ("b4", "c2")


def scenario_seed(master_seed: int, key: str) -> int:
    """64-bit seed for one scenario, stable under grid subsetting and reordering."""
    ss = np.random.SeedSequence([master_seed & 0xFFFFFFFF, master_seed >> 32,
                                 zlib.crc32(key.encode())])
    return int(ss.generate_state(1, np.uint64)[0])


@dataclass(frozen=True)
class Scenario:
    label: str
    design: TrialDesign
    hierarchy: EndpointHierarchy
    params: tuple[EndpointParams, ...]
    methods: tuple[str, ...]
    n_replicates: int
    seed: int
    n_per_cell: int = 10
    meta: dict = field(default_factory=dict, compare=False)

    def __post_init__(self):
        if self.n_replicates < 1:
            raise ValueError("n_replicates must be >= 1")
        if not self.methods:
            raise ValueError("a scenario needs at least one method")
        bad = set(self.methods) - set(METHODS)
        if bad:
            raise ValueError(f"unknown methods {sorted(bad)}")
        if len(self.params) != len(self.hierarchy):
            raise ValueError("one parameter set per endpoint is required")

    def dataset(self, replicate: int) -> Dataset:
        return simulate(self.design, self.hierarchy, self.params, self.n_per_cell,
                        RngSpec(self.seed, replicate))


@dataclass(frozen=True)
class MethodSummary:
    n_reps: int
    rejections: int
    n_fail: int
    mean_delta_hat: float
    sd_delta_hat: float

    @property
    def n_ok(self) -> int:
        return self.n_reps - self.n_fail

    @property
    def rejection_rate(self) -> float:
        return self.rejections / self.n_ok if self.n_ok else math.nan

    @property
    def mcse(self) -> float:
        r = self.rejection_rate
        return math.sqrt(r * (1 - r) / self.n_ok) if self.n_ok else math.nan


@dataclass
class OperatingCharacteristics:
    scenario: Scenario
    by_method: dict[str, MethodSummary]
    replicates: np.ndarray = field(repr=False)   # (R, n_methods, 2): delta_hat, p_value

    def rejection_rate(self, method: str) -> float:
        return self.by_method[method].rejection_rate

    def mcse(self, method: str) -> float:
        return self.by_method[method].mcse

    def rows(self) -> list[dict]:
        meta = self.scenario.meta
        out = []
        for m, s in self.by_method.items():
            out.append({
                "scenario_label": self.scenario.label,
                "p0": meta.get("p0"), "icc": meta.get("icc"), "cac": meta.get("cac"),
                "beta_t": meta.get("beta_t"), "delta": meta.get("delta"), "method": m,
                "endpoint_set": meta.get("endpoint_set", "+".join(self.scenario.hierarchy.names)),
                "n_reps": s.n_reps, "rejections": s.rejections,
                "rejection_rate": s.rejection_rate, "mcse": s.mcse,
                "mean_delta_hat": s.mean_delta_hat, "sd_delta_hat": s.sd_delta_hat,
                "n_fail": s.n_fail,
            })
        return out


def run_replicate(scenario: Scenario, replicate: int) -> np.ndarray:
    """``(n_methods, 2)`` array of (delta_hat, p_value); NaN marks a failed method."""
    data = scenario.dataset(replicate)
    out = np.full((len(scenario.methods), 2), np.nan)
    for i, m in enumerate(scenario.methods):
        try:
            res = run_method(m, data)
        except MethodError as e:
            log.debug("scenario %s rep %d: %s", scenario.label, replicate, e)
            continue
        out[i] = res.delta_hat, res.p_value
    return out


def summarise(scenario: Scenario, reps: np.ndarray) -> OperatingCharacteristics:
    by_method = {}
    for i, m in enumerate(scenario.methods):
        est, p = reps[:, i, 0], reps[:, i, 1]
        ok = np.isfinite(est) & np.isfinite(p)
        n_ok = int(ok.sum())
        by_method[m] = MethodSummary(
            n_reps=reps.shape[0],
            rejections=int(np.sum(p[ok] < ALPHA)),
            n_fail=reps.shape[0] - n_ok,
            mean_delta_hat=float(np.mean(est[ok])) if n_ok else math.nan,
            sd_delta_hat=float(np.std(est[ok], ddof=1)) if n_ok > 1 else math.nan,
        )
    return OperatingCharacteristics(scenario, by_method, reps)


def _task(args):
    scenario, r = args
    return run_replicate(scenario, r)


def default_threads() -> int:
    return len(os.sched_getaffinity(0)) if hasattr(os, "sched_getaffinity") else os.cpu_count() or 1


def run_scenarios(scenarios: Sequence[Scenario], threads: int | None = None,
                  progress: Callable[[int, int], None] | None = None,
                  ) -> list[OperatingCharacteristics]:
    """Run every replicate of every scenario; results do not depend on ``threads``."""
    tasks = [(s, r) for s in scenarios for r in range(s.n_replicates)]
    threads = threads or default_threads()
    results: list[np.ndarray] = []
    if threads == 1 or len(tasks) == 1:
        for i, t in enumerate(tasks):
            results.append(_task(t))
            if progress:
                progress(i + 1, len(tasks))
    else:
        with ProcessPoolExecutor(max_workers=threads) as pool:
            chunk = max(1, len(tasks) // (threads * 8))
            for i, res in enumerate(pool.map(_task, tasks, chunksize=chunk)):
                results.append(res)
                if progress:
                    progress(i + 1, len(tasks))
    out, pos = [], 0
    for s in scenarios:
        out.append(summarise(s, np.stack(results[pos:pos + s.n_replicates])))
        pos += s.n_replicates
    return out


def run_scenario(scenario: Scenario, threads: int | None = None) -> OperatingCharacteristics:
    return run_scenarios([scenario], threads)[0]


def results_frame(ocs: Iterable[OperatingCharacteristics]) -> pd.DataFrame:
    return pd.DataFrame([row for oc in ocs for row in oc.rows()], columns=RESULT_COLUMNS)


def binary_scenario(p0: float, icc: float, cac: float, beta_t: float, delta: float, *,
                    n_replicates: int = 500, master_seed: int = 0,
                    methods: Sequence[str] = METHODS, design: TrialDesign | None = None,
                    n_per_cell: int = 10) -> Scenario:
    """Single binary endpoint (event = favourable) on the 45/5/6 design by default."""
    design = design or make_uniform_design(45, 5, 6)
    label = f"p0={p0:g}|icc={icc:g}|cac={cac:g}|beta_t={beta_t:g}|delta={delta:g}"
    return Scenario(
        label=label, design=design,
        hierarchy=EndpointHierarchy((("y1", EndpointSpec("binary", "higher")),)),
        params=(BinaryEndpointParams(p0, delta, beta_t, icc, cac),),
        methods=tuple(methods), n_replicates=n_replicates,
        seed=scenario_seed(master_seed, label), n_per_cell=n_per_cell,
        meta=dict(p0=p0, icc=icc, cac=cac, beta_t=beta_t, delta=delta, endpoint_set="y1"),
    )


def paper_grid(n_replicates: int = 500, master_seed: int = 0,
               methods: Sequence[str] = METHODS) -> list[Scenario]:
    """Full factorial grid of the generic simulation study (1600 scenarios)."""
    return [binary_scenario(p0, icc, cac, bt, d, n_replicates=n_replicates,
                            master_seed=master_seed, methods=methods)
            for p0, icc, cac, bt, d in itertools.product(
                GRID_P0, GRID_ICC, GRID_CAC, GRID_BETA_T, GRID_DELTA)]


def ether_hierarchy() -> EndpointHierarchy:
    eps = [(name, EndpointSpec("binary", "lower")) for name, _, _ in ETHER_BINARY]
    eps.append(("pam", EndpointSpec("continuous", "higher", ETHER_PAM["tie"])))
    return EndpointHierarchy(tuple(eps))


def ether_params(icc: float, cac: float, beta_t: float) -> tuple[EndpointParams, ...]:
    pam = ETHER_PAM
    return tuple(BinaryEndpointParams(p0, d, beta_t, icc, cac) for _, p0, d in ETHER_BINARY) + (
        ContinuousEndpointParams(pam["mu0"], pam["delta"], pam["sigma"], icc, cac,
                                 pam["lo"], pam["hi"]),)


def ether_scenario(icc: float, cac: float, beta_t: float, n_endpoints: int, *,
                   n_replicates: int = 500, master_seed: int = 0,
                   methods: Sequence[str] = ETHER_METHODS,
                   design: TrialDesign | None = None) -> Scenario:
    """ETHER composite with its first ``n_endpoints`` criteria.

    The seed depends on the correlation cell only, so the nested endpoint sets
    of one cell analyse the same simulated patients.
    """
    design = design or make_uniform_design(45, 5, 6)
    cell = f"ether|icc={icc:g}|cac={cac:g}|beta_t={beta_t:g}"
    hier = ether_hierarchy().truncate(n_endpoints)
    return Scenario(
        label=f"{cell}|m={n_endpoints}", design=design, hierarchy=hier,
        params=ether_params(icc, cac, beta_t)[:n_endpoints], methods=tuple(methods),
        n_replicates=n_replicates, seed=scenario_seed(master_seed, cell), n_per_cell=10,
        meta=dict(icc=icc, cac=cac, beta_t=beta_t, endpoint_set="+".join(hier.names)),
    )


def ether_scenarios(n_replicates: int = 500, master_seed: int = 0,
                    methods: Sequence[str] = ETHER_METHODS) -> list[Scenario]:
    return [ether_scenario(icc, cac, bt, m, n_replicates=n_replicates,
                           master_seed=master_seed, methods=methods)
            for icc, cac, bt, m in itertools.product(ETHER_ICC, ETHER_CAC, ETHER_BETA_T,
                                                     (1, 2, 3, 4))]


def true_win_odds_binary(p0: float, delta: float) -> float:
    """Population win odds of treated vs control for one Bernoulli endpoint
    (event favourable) with control rate ``p0`` and log-odds effect ``delta``."""
    if not 0 < p0 < 1:
        raise ValueError("p0 must lie in (0, 1)")
    pc = p0
    pt = float(expit(logit(p0) + delta))
    tie = pt * pc + (1 - pt) * (1 - pc)
    return (pt * (1 - pc) + 0.5 * tie) / (pc * (1 - pt) + 0.5 * tie)
