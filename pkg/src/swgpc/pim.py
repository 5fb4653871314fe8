"""Probabilistic index models with a logit link.

Each pair of individuals ``(a, b)`` contributes a pseudo-response
``S = 1`` if ``a`` is better, ``0.5`` for a neutral pair and ``0`` otherwise,
with covariates ``(X_a - X_b, t_a - t_b)``. Pairs are oriented by dataset row
order (cluster, period, within-cell index), smaller key first.

By default the model has no intercept: the score equations are then
invariant to pair orientation, so unique pairs carry all the information.
Inference uses a sandwich whose middle term sums score cross-products over
every two pairs sharing an individual.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import stats
from scipy.special import expit

from .design import Dataset
from .gpc import score_pairs


class PimError(RuntimeError):
    pass


@dataclass(frozen=True)
class PimPairs:
    """Column store of oriented pairs (row indices into the source dataset)."""

    first: np.ndarray
    second: np.ndarray
    s: np.ndarray
    dx: np.ndarray
    dt: np.ndarray
    n_individuals: int

    def __len__(self) -> int:
        return int(self.first.size)

    def design(self, intercept: bool = False) -> np.ndarray:
        cols = [self.dx.astype(float), self.dt]
        if intercept:
            cols.insert(0, np.ones(len(self)))
        return np.column_stack(cols)

    def flipped(self) -> PimPairs:
        return PimPairs(self.second, self.first, 1.0 - self.s, -self.dx, -self.dt,
                        self.n_individuals)

    def concat(self, other: PimPairs) -> PimPairs:
        return PimPairs(*(np.concatenate([getattr(self, f), getattr(other, f)])
                          for f in ("first", "second", "s", "dx", "dt")),
                        n_individuals=max(self.n_individuals, other.n_individuals))

    def to_frame(self):
        import pandas as pd
        return pd.DataFrame({"i": self.first, "j": self.second, "S": self.s,
                             "dx": self.dx, "dt": self.dt})


def _pairs_from_index(dataset: Dataset, first: np.ndarray, second: np.ndarray) -> PimPairs:
    Y = dataset.outcomes
    score = score_pairs(Y[first], Y[second], dataset.hierarchy)
    s = 0.5 * (score.astype(np.float64) + 1.0)
    dx = dataset.treatment[first].astype(np.int8) - dataset.treatment[second].astype(np.int8)
    dt = dataset.time[first] - dataset.time[second]
    return PimPairs(first.astype(np.int64), second.astype(np.int64), s, dx, dt, dataset.n)


def build_pairs_c1(dataset: Dataset) -> PimPairs:
    """All ``N(N-1)/2`` unordered pairs of distinct individuals."""
    if dataset.n < 2:
        raise PimError("need at least two individuals")
    first, second = np.triu_indices(dataset.n, k=1)
    return _pairs_from_index(dataset, first, second)


def build_pairs_c2(dataset: Dataset) -> PimPairs:
    """Pairs of distinct individuals from the same cluster, all periods."""
    firsts, seconds = [], []
    cl = dataset.cluster
    starts = np.flatnonzero(np.r_[True, cl[1:] != cl[:-1]]) if dataset.n else np.array([], int)
    ends = np.r_[starts[1:], dataset.n]
    for a, b in zip(starts, ends):
        if b - a < 2:
            continue
        i, j = np.triu_indices(b - a, k=1)
        firsts.append(i + a)
        seconds.append(j + a)
    if not firsts:
        raise PimError("no cluster has two or more individuals")
    return _pairs_from_index(dataset, np.concatenate(firsts), np.concatenate(seconds))


@dataclass
class PimFit:
    names: tuple[str, ...]
    beta: np.ndarray
    vcov: np.ndarray
    n_pairs: int
    n_iter: int
    max_score: float
    b_projected: bool = False

    @property
    def se(self) -> np.ndarray:
        return np.sqrt(np.diag(self.vcov))

    @property
    def z(self) -> np.ndarray:
        return self.beta / self.se

    @property
    def p_values(self) -> np.ndarray:
        return 2.0 * stats.norm.sf(np.abs(self.z))

    def coef(self, name: str) -> float:
        return float(self.beta[self.names.index(name)])


def _nearest_psd(B: np.ndarray) -> np.ndarray:
    w, V = np.linalg.eigh(0.5 * (B + B.T))
    return (V * np.maximum(w, 0.0)) @ V.T


def fit_pim(pairs: PimPairs, *, intercept: bool = False, tol: float = 1e-8,
            max_iter: int = 100) -> PimFit:
    """Solve ``sum_p Z_p (S_p - expit(Z_p' beta)) = 0`` by damped Newton.

    Returns the root with the pair-overlap sandwich covariance.
    """
    Z = pairs.design(intercept)
    names = (("alpha",) if intercept else ()) + ("delta", "gamma")
    keep = np.any(Z != 0, axis=0)
    if not keep.all():
        # a covariate that is identically zero (e.g. a single-period dataset has dt = 0
        # within cells only) is dropped rather than making the system singular
        Z = Z[:, keep]
        names = tuple(n for n, k in zip(names, keep) if k)
    if Z.shape[1] == 0:
        raise PimError("every pair covariate is identically zero")
    if np.linalg.matrix_rank(Z) < Z.shape[1]:
        raise PimError("pair design matrix is rank deficient")
    S = pairs.s
    beta = np.zeros(Z.shape[1])

    def score(b):
        mu = expit(Z @ b)
        return Z.T @ (S - mu), mu

    U, mu = score(beta)
    obj = float(U @ U)
    it = 0
    for it in range(1, max_iter + 1):
        if np.max(np.abs(U)) < tol:
            break
        A = (Z * (mu * (1 - mu))[:, None]).T @ Z
        try:
            step = np.linalg.solve(A, U)
        except np.linalg.LinAlgError as e:
            raise PimError("singular PIM information matrix") from e
        t = 1.0
        while True:
            cand = beta + t * step
            U_c, mu_c = score(cand)
            obj_c = float(U_c @ U_c)
            if obj_c < obj or t < 1e-8:
                break
            t *= 0.5
        if obj_c >= obj and t < 1e-8:
            break
        beta, U, mu, obj = cand, U_c, mu_c, obj_c
        if np.max(np.abs(t * step)) < 1e-14 * max(1.0, np.max(np.abs(beta))):
            break
    max_score = float(np.max(np.abs(U)))
    scale = max(1.0, float(np.abs(Z).sum(axis=0).max())) * 1e-14
    if max_score >= max(tol, scale) or not np.all(np.isfinite(beta)):
        raise PimError(f"PIM estimating equations did not converge (max |U| = {max_score:.3g})")
    if np.max(np.abs(Z @ beta)) > 15:
        # the score only vanishes at infinity: complete separation
        raise PimError("no finite root; pair outcomes are separated by the covariates")

    A = (Z * (mu * (1 - mu))[:, None]).T @ Z
    resid = S - mu
    Up = Z * resid[:, None]
    N = pairs.n_individuals
    P = Z.shape[1]
    per_ind = np.empty((N, P))
    for c in range(P):
        per_ind[:, c] = (np.bincount(pairs.first, weights=Up[:, c], minlength=N)
                         + np.bincount(pairs.second, weights=Up[:, c], minlength=N))
    # pairs sharing one member appear once in sum_i s_i s_i', a pair with itself twice
    B = per_ind.T @ per_ind - Up.T @ Up
    projected = False
    if np.min(np.linalg.eigvalsh(0.5 * (B + B.T))) < 0:
        B = _nearest_psd(B)
        projected = True
    Ainv = np.linalg.inv(A)
    vcov = Ainv @ B @ Ainv.T
    vcov = 0.5 * (vcov + vcov.T)
    return PimFit(names=names, beta=beta, vcov=vcov, n_pairs=len(pairs), n_iter=it,
                  max_score=max_score, b_projected=projected)
