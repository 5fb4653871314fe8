"""The eight win-odds analyses of a stepped-wedge dataset.

Every method returns a :class:`FitResult` for the treatment effect on the
log win-odds scale or raises :class:`MethodError`.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy import stats

from .design import Dataset
from .gpc import NoComparisonsError, WinStats, cluster_period_table, pooled_log_wo, score_matrix
from .lmm import LmmError, LmmSpec, RandomTerm, fit_reml
from .pim import PimError, build_pairs_c1, build_pairs_c2, fit_pim

METHODS = ("a1", "a2", "b1", "b2", "b3", "b4", "c1", "c2")


class MethodError(RuntimeError):
    """A method could not produce an estimate for this dataset."""

    def __init__(self, method: str, message: str):
        super().__init__(f"{method}: {message}")
        self.method = method


@dataclass
class FitResult:
    method: str
    delta_hat: float
    std_err: float
    df: float                     # math.inf for normal-reference tests
    p_value: float
    diagnostics: dict = field(default_factory=dict)

    @property
    def wo_hat(self) -> float:
        return math.exp(self.delta_hat)

    def to_dict(self) -> dict:
        return {"method": self.method, "delta_hat": self.delta_hat, "wo_hat": self.wo_hat,
                "std_err": self.std_err, "df": self.df if math.isfinite(self.df) else None,
                "p_value": self.p_value, "diagnostics": self.diagnostics}


def two_sided_p(estimate: float, std_err: float, df: float = math.inf) -> float:
    if std_err == 0:
        return 1.0 if estimate == 0 else 0.0
    z = abs(estimate) / std_err
    return float(2.0 * (stats.norm.sf(z) if math.isinf(df) else stats.t.sf(z, df)))


def _result(method, est, se, df=math.inf, **diag) -> FitResult:
    if not (math.isfinite(est) and math.isfinite(se)) or se < 0:
        raise MethodError(method, "non-finite estimate or standard error")
    if se == 0 and est != 0:
        raise MethodError(method, "zero standard error with a non-zero estimate")
    return FitResult(method, float(est), float(se), float(df), two_sided_p(est, se, df), diag)


def log_wo_variance(scores: np.ndarray, stats_: WinStats) -> float:
    """Delta-method variance of log WO from the two-sample U-statistic.

    ``scores`` is the (treated x control) matrix of pair scores. The variance
    of the probabilistic index uses per-individual placement means (ties count
    one half) and is mapped to the log scale through d logit(p)/dp.
    """
    h = 0.5 * (scores.astype(np.float64) + 1.0)
    m, n = h.shape
    pi = h.mean()
    var_pi = 0.0
    if m > 1:
        var_pi += h.mean(axis=1).var(ddof=1) / m
    if n > 1:
        var_pi += h.mean(axis=0).var(ddof=1) / n
    if stats_.corrected:
        # boundary estimate: evaluate the Jacobian at the corrected index
        pi = stats_.wo / (1.0 + stats_.wo)
    return var_pi / (pi * (1.0 - pi)) ** 2


def _arm_scores(dataset: Dataset, mask: np.ndarray | slice | None = None):
    Y = dataset.outcomes if mask is None else dataset.outcomes[mask]
    X = dataset.treatment if mask is None else dataset.treatment[mask]
    treated, control = Y[X == 1], Y[X == 0]
    if len(treated) == 0 or len(control) == 0:
        return None
    S = score_matrix(treated, control, dataset.hierarchy)
    return S, WinStats.from_scores(S)


def method_a1(dataset: Dataset) -> FitResult:
    """Crude win odds of all treated against all control individuals."""
    arms = _arm_scores(dataset)
    if arms is None:
        raise MethodError("a1", "an arm is empty")
    S, ws = arms
    return _result("a1", ws.log_wo, math.sqrt(log_wo_variance(S, ws)),
                   n_win=ws.n_win, n_loss=ws.n_loss, n_tie=ws.n_tie, corrected=ws.corrected)


def method_a2(dataset: Dataset, weighting: str = "pairs") -> FitResult:
    """Cluster-stratified win odds, pooled on the log scale.

    ``weighting="pairs"`` uses weights proportional to the number of
    treated-control pairs in each cluster; ``"inverse_variance"`` is offered
    for sensitivity work and drops clusters with zero variance.
    """
    strata, variances = [], []
    for k in dataset.design.clusters:
        arms = _arm_scores(dataset, dataset.cluster == k)
        if arms is None:
            continue
        S, ws = arms
        strata.append(ws)
        variances.append(log_wo_variance(S, ws))
    if not strata:
        raise MethodError("a2", "no cluster has both arms")
    variances = np.array(variances)
    if weighting == "pairs":
        weights = np.array([ws.n_pairs for ws in strata], dtype=float)
    elif weighting == "inverse_variance":
        weights = np.where(variances > 0, 1.0 / np.where(variances > 0, variances, 1.0), 0.0)
    else:
        raise ValueError(f"unknown weighting {weighting!r}")
    try:
        est, w = pooled_log_wo(zip(strata, weights))
    except NoComparisonsError as e:
        raise MethodError("a2", str(e)) from e
    var = float(np.sum(w ** 2 * variances[weights > 0]))
    return _result("a2", est, math.sqrt(var), n_clusters=len(strata),
                   n_corrected=int(sum(ws.corrected for ws in strata)))


B_TERMS = {
    "b1": ("cluster", "period_pair"),
    "b2": ("cluster", "period_pair", "cluster_dx"),
    "b3": ("cluster", "period_pair", "sequence_dx"),
    "b4": ("cluster", "period_pair", "sequence_dx", "cluster_dx"),
}


def b_spec(table, variant: str, weights: np.ndarray | None = None) -> LmmSpec:
    """Mixed model for cluster-period log win odds: fixed intercept, dx and dj."""
    if variant not in B_TERMS:
        raise ValueError(f"unknown b-variant {variant!r}")
    dx = table["dx"].to_numpy(dtype=float)
    X = np.column_stack([np.ones(len(table)), dx, table["dj"].to_numpy(dtype=float)])
    pp = table["j1"].to_numpy() * 1000 + table["j2"].to_numpy()
    available = {
        "cluster": RandomTerm("cluster", table["cluster"].to_numpy()),
        "period_pair": RandomTerm("period_pair", pp),
        "cluster_dx": RandomTerm("cluster_dx", table["cluster"].to_numpy(), dx),
        "sequence_dx": RandomTerm("sequence_dx", table["sequence"].to_numpy(), dx),
    }
    return LmmSpec(table["log_wo"].to_numpy(dtype=float), X,
                   tuple(available[n] for n in B_TERMS[variant]),
                   fixed_names=("intercept", "dx", "dj"), weights=weights)


def method_b(dataset: Dataset, variant: str = "b4", weighted: bool = False) -> FitResult:
    """Cluster-period win odds analysed by a REML mixed model with KR inference."""
    table = cluster_period_table(dataset)
    table = table[table["n_pairs"] > 0]
    if table.empty or table["dx"].nunique() < 2:
        raise MethodError(variant, "cluster-period table lacks variation in dx")
    spec = b_spec(table, variant, table["n_pairs"].to_numpy(float) if weighted else None)
    if np.ptp(spec.y) == 0:
        # every log WO identical: the constant absorbs it and the treatment effect is 0
        return _result(variant, 0.0, 0.0, math.nan, degenerate=True, n_rows=len(table))
    try:
        fit = fit_reml(spec)
    except (LmmError, np.linalg.LinAlgError) as e:
        raise MethodError(variant, str(e)) from e
    i = fit.coef("dx")
    return _result(variant, fit.beta[i], fit.se_kr[i], fit.df_kr[i],
                   gamma=float(fit.beta[fit.coef("dj")]),
                   alpha=float(fit.beta[fit.coef("intercept")]),
                   variances=dict(zip(fit.term_names, map(float, fit.theta))),
                   sigma2=float(fit.sigma2), reml_loglik=float(fit.reml_loglik),
                   kr_fallback=fit.kr_fallback, n_rows=len(table),
                   n_corrected=int(table["corrected"].sum()))


def method_c(dataset: Dataset, variant: str = "c2", intercept: bool = False) -> FitResult:
    """Probabilistic index model on all pairs (c1) or within-cluster pairs (c2)."""
    if variant not in ("c1", "c2"):
        raise ValueError(f"unknown c-variant {variant!r}")
    try:
        pairs = build_pairs_c1(dataset) if variant == "c1" else build_pairs_c2(dataset)
        if not np.any(pairs.dx):
            raise MethodError(variant, "no pair differs in treatment")
        fit = fit_pim(pairs, intercept=intercept)
    except PimError as e:
        raise MethodError(variant, str(e)) from e
    if "delta" not in fit.names:
        raise MethodError(variant, "treatment contrast not estimable")
    i = fit.names.index("delta")
    diag = {"n_pairs": fit.n_pairs, "n_iter": fit.n_iter, "b_projected": fit.b_projected}
    for name in ("alpha", "gamma"):
        if name in fit.names:
            diag[name] = fit.coef(name)
    return _result(variant, fit.beta[i], float(fit.se[i]), **diag)


def run_method(method: str, dataset: Dataset) -> FitResult:
    if method == "a1":
        return method_a1(dataset)
    if method == "a2":
        return method_a2(dataset)
    if method in B_TERMS:
        return method_b(dataset, method)
    if method in ("c1", "c2"):
        return method_c(dataset, method)
    raise ValueError(f"unknown method {method!r}; expected one of {METHODS}")
