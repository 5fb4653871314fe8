"""REML fitting of linear mixed models with independent variance components,
plus Kenward-Roger small-sample inference for the fixed effects.

The marginal covariance is ``V = sigma2 * I + sum_r tau_r Z_r Z_r'`` where each
random term ``r`` has one variance ``tau_r`` shared by all its levels. The
REML likelihood is profiled over ``sigma2`` and maximised over the variance
ratios ``psi_r = tau_r / sigma2 >= 0``; all per-iteration linear algebra is
done in the random-effect dimension through the Woodbury identity.
"""

from __future__ import annotations

import math
import warnings
from collections.abc import Mapping, Sequence
from dataclasses import dataclass, field

import numpy as np
from scipy import linalg, optimize, stats

GRAD_TOL = 1e-6
# the polish keeps going past GRAD_TOL: the criterion is flat in large ratios,
# so a 1e-6 gradient can still leave ~1e-7 error in the variance components
POLISH_TOL = 1e-11


class LmmError(RuntimeError):
    pass


class LmmConvergenceError(LmmError):
    pass


@dataclass(frozen=True)
class RandomTerm:
    """One variance component: levels of ``groups``, times ``covariate`` if given."""

    name: str
    groups: np.ndarray
    covariate: np.ndarray | None = None

    def design(self) -> np.ndarray:
        levels, codes = np.unique(np.asarray(self.groups), return_inverse=True)
        Z = np.zeros((codes.size, levels.size))
        Z[np.arange(codes.size), codes] = 1.0 if self.covariate is None else np.asarray(
            self.covariate, dtype=float)
        return Z


@dataclass(frozen=True)
class LmmSpec:
    y: np.ndarray
    X: np.ndarray
    terms: tuple[RandomTerm, ...]
    fixed_names: tuple[str, ...] | None = None
    weights: np.ndarray | None = None

    def __post_init__(self):
        y = np.asarray(self.y, dtype=float)
        X = np.asarray(self.X, dtype=float)
        if X.ndim == 1:
            X = X[:, None]
        object.__setattr__(self, "y", y)
        object.__setattr__(self, "X", X)
        object.__setattr__(self, "terms", tuple(self.terms))
        names = self.fixed_names or tuple(f"x{i}" for i in range(X.shape[1]))
        object.__setattr__(self, "fixed_names", tuple(names))
        if X.shape[0] != y.shape[0]:
            raise LmmError("X and y have different row counts")
        if len(self.fixed_names) != X.shape[1]:
            raise LmmError("fixed_names does not match the columns of X")


@dataclass
class LmmFit:
    fixed_names: tuple[str, ...]
    term_names: tuple[str, ...]
    beta: np.ndarray
    theta: np.ndarray          # variance components tau_r
    sigma2: float
    vcov_beta: np.ndarray
    reml_loglik: float
    converged: bool
    grad_norm: float
    n_obs: int
    vcov_beta_kr: np.ndarray | None = None
    df_kr: np.ndarray | None = None
    p_values: np.ndarray | None = None
    kr_fallback: bool = False
    _kr_parts: dict = field(default=None, repr=False)

    @property
    def se_kr(self) -> np.ndarray:
        return np.sqrt(np.diag(self.vcov_beta_kr))

    @property
    def se(self) -> np.ndarray:
        return np.sqrt(np.diag(self.vcov_beta))

    def coef(self, name: str) -> int:
        return self.fixed_names.index(name)

    def variance(self, term: str) -> float:
        return float(self.theta[self.term_names.index(term)])


class _Profile:
    """Profiled REML criterion as a function of the variance ratios."""

    def __init__(self, spec: LmmSpec):
        y, X = spec.y, spec.X
        n, p = X.shape
        blocks = [t.design() for t in spec.terms]
        Z = np.hstack(blocks) if blocks else np.zeros((n, 0))
        if spec.weights is not None:
            w = np.sqrt(np.asarray(spec.weights, dtype=float))
            if np.any(w <= 0):
                raise LmmError("weights must be positive")
            y, X, Z = y * w, X * w[:, None], Z * w[:, None]
            self.log_w = float(np.sum(np.log(np.asarray(spec.weights, dtype=float))))
        else:
            self.log_w = 0.0
        if n <= p:
            raise LmmError("need more observations than fixed effects")
        if np.linalg.matrix_rank(X) < p:
            raise LmmError("fixed-effects design is rank deficient")
        for t, B in zip(spec.terms, blocks):
            if B.shape[1] < 2:
                raise LmmError(f"random term {t.name!r} needs at least two levels")
        self.n, self.p = n, p
        self.y, self.X, self.Z = y, X, Z
        self.sizes = [B.shape[1] for B in blocks]
        self.col_term = np.repeat(np.arange(len(blocks)), self.sizes)
        self.slices = []
        start = 0
        for s in self.sizes:
            self.slices.append(slice(start, start + s))
            start += s
        self.q = Z.shape[1]
        A = np.hstack([Z, X, y[:, None]])
        self.C = A.T @ A
        q = self.q
        self.iz, self.ix, self.iy = slice(0, q), slice(q, q + p), q + p

    def parts(self, psi: np.ndarray):
        q, p, n = self.q, self.p, self.n
        lam = np.sqrt(np.maximum(psi, 0.0))[self.col_term]
        M = lam[:, None] * self.C[:q, :q] * lam[None, :]
        M[np.diag_indices(q)] += 1.0
        L = linalg.cholesky(M, lower=True, check_finite=False) if q else np.zeros((0, 0))
        T = linalg.solve_triangular(L, lam[:, None] * self.C[:q, :], lower=True,
                                    check_finite=False) if q else np.zeros((0, self.C.shape[0]))
        K = self.C - T.T @ T
        KXX = K[self.ix, self.ix]
        RX = linalg.cholesky(KXX, lower=True, check_finite=False)
        KXy = K[self.ix, self.iy]
        beta = linalg.cho_solve((RX, True), KXy, check_finite=False)
        r = float(K[self.iy, self.iy] - KXy @ beta)
        logdet_M = 2.0 * float(np.sum(np.log(np.diag(L)))) if q else 0.0
        logdet_X = 2.0 * float(np.sum(np.log(np.diag(RX))))
        return dict(L=L, lam=lam, K=K, RX=RX, beta=beta, r=r,
                    logdet_M=logdet_M, logdet_X=logdet_X)

    def loglik(self, psi: np.ndarray, parts=None) -> float:
        P = parts or self.parts(psi)
        dof = self.n - self.p
        if P["r"] <= 0:
            raise LmmError("response is reproduced exactly by the fixed effects")
        return -0.5 * (P["logdet_M"] + P["logdet_X"]
                       + dof * (1.0 + math.log(2 * math.pi * P["r"] / dof))) + 0.5 * self.log_w

    def grad(self, psi: np.ndarray, parts=None) -> np.ndarray:
        """Derivative of the profiled REML log-likelihood w.r.t. each ratio."""
        P = parts or self.parts(psi)
        K, RX, beta = P["K"], P["RX"], P["beta"]
        KZX = K[self.iz, self.ix]
        KZZ = K[self.iz, self.iz]
        S = linalg.solve_triangular(RX, KZX.T, lower=True, check_finite=False)
        ZPy = K[self.iz, self.iy] - KZX @ beta
        dof = self.n - self.p
        g = np.empty(len(self.sizes))
        for r, sl in enumerate(self.slices):
            tr = float(np.trace(KZZ[sl, sl]) - np.sum(S[:, sl] ** 2))
            g[r] = -0.5 * tr + 0.5 * dof * float(ZPy[sl] @ ZPy[sl]) / P["r"]
        return g


def _projected_grad(psi, g, at_bound_tol=0.0):
    pg = g.copy()
    lower = psi <= at_bound_tol
    pg[lower] = np.maximum(g[lower], 0.0)
    return pg


def _hessian(prof: _Profile, psi: np.ndarray, free: np.ndarray) -> np.ndarray:
    idx = np.flatnonzero(free)
    H = np.empty((idx.size, idx.size))
    g0 = prof.grad(psi)
    for a, i in enumerate(idx):
        h = 1e-5 * max(1.0, psi[i])
        e = psi.copy()
        if psi[i] > h:
            e[i] -= h
            H[:, a] = (g0[idx] - prof.grad(e)[idx]) / h
        else:
            e[i] += h
            H[:, a] = (prof.grad(e)[idx] - g0[idx]) / h
    return 0.5 * (H + H.T)


def _polish(prof: _Profile, psi: np.ndarray, fixed: np.ndarray, max_iter: int = 50):
    """Active-set projected Newton refinement of a near-optimal ratio vector."""
    ll = prof.loglik(psi)
    for _ in range(max_iter):
        g = prof.grad(psi)
        g[fixed] = 0.0
        pg = _projected_grad(psi, g)
        if np.max(np.abs(pg), initial=0.0) < POLISH_TOL:
            return psi, ll, True
        free = ((psi > 0) | (g > 0)) & ~fixed
        if not free.any():
            return psi, ll, True
        H = _hessian(prof, psi, free)
        gf = g[free]
        try:
            np.linalg.cholesky(-H)
            step = np.linalg.solve(-H, gf)
        except np.linalg.LinAlgError:
            step = gf / max(1.0, float(np.max(np.abs(np.diag(H)))))
        t = 1.0
        improved = False
        while t > 1e-10:
            cand = psi.copy()
            cand[free] = np.maximum(psi[free] + t * step, 0.0)
            # snap tiny ratios to the boundary
            cand[(cand < 1e-12) & free] = 0.0
            ll_c = prof.loglik(cand)
            if ll_c >= ll - 1e-12 * max(1.0, abs(ll)):
                improved = ll_c > ll or np.allclose(cand, psi)
                psi, ll = cand, ll_c
                break
            t *= 0.5
        if not improved:
            break
    g = prof.grad(psi)
    g[fixed] = 0.0
    pg = _projected_grad(psi, g)
    return psi, ll, bool(np.max(np.abs(pg), initial=0.0) < GRAD_TOL)


def fit_reml(spec: LmmSpec, *, fixed: Mapping[str, float] | None = None,
             kr: bool = True, start: Sequence[float] | None = None,
             max_iter: int = 500) -> LmmFit:
    """Fit ``spec`` by REML and (optionally) attach Kenward-Roger inference.

    ``fixed`` pins named variance ratios ``tau_r / sigma2`` (typically to 0 to
    fit a nested model). Raises :class:`LmmConvergenceError` when the
    optimiser cannot reach a projected REML score below ``GRAD_TOL``.
    """
    prof = _Profile(spec)
    names = tuple(t.name for t in spec.terms)
    R = len(names)
    fixed = dict(fixed or {})
    unknown = set(fixed) - set(names)
    if unknown:
        raise LmmError(f"unknown random terms: {sorted(unknown)}")
    fixed_mask = np.array([n in fixed for n in names], dtype=bool)
    psi0 = np.ones(R) if start is None else np.asarray(start, dtype=float).copy()
    for i, n in enumerate(names):
        if n in fixed:
            psi0[i] = fixed[n]

    if R and not fixed_mask.all():
        free = ~fixed_mask

        def objective(th):
            psi = psi0.copy()
            psi[free] = th ** 2
            parts = prof.parts(psi)
            ll = prof.loglik(psi, parts)
            g = prof.grad(psi, parts)[free]
            return -ll, -2.0 * th * g

        res = optimize.minimize(objective, np.sqrt(psi0[free]), jac=True, method="L-BFGS-B",
                                bounds=[(0.0, None)] * int(free.sum()),
                                options=dict(maxiter=max_iter, ftol=1e-15, gtol=1e-10))
        psi = psi0.copy()
        psi[free] = res.x ** 2
        psi[free & (psi < 1e-12)] = 0.0
        psi, ll, converged = _polish(prof, psi, fixed_mask)
    else:
        psi = psi0
        ll = prof.loglik(psi)
        converged = True
    g = prof.grad(psi) if R else np.zeros(0)
    g[fixed_mask] = 0.0
    grad_norm = float(np.linalg.norm(_projected_grad(psi, g)))
    if not converged:
        raise LmmConvergenceError(f"REML did not converge (projected gradient {grad_norm:.3g})")

    P = prof.parts(psi)
    sigma2 = P["r"] / (prof.n - prof.p)
    KXX_inv = linalg.cho_solve((P["RX"], True), np.eye(prof.p), check_finite=False)
    fit = LmmFit(
        fixed_names=spec.fixed_names, term_names=names, beta=P["beta"],
        theta=psi * sigma2, sigma2=sigma2, vcov_beta=sigma2 * KXX_inv,
        reml_loglik=ll, converged=converged, grad_norm=grad_norm, n_obs=prof.n,
    )
    fit._kr_parts = dict(prof=prof, parts=P)
    if kr:
        kenward_roger(fit)
    return fit


def _kr_matrices(fit: LmmFit):
    """pbkrtest-style P, Q and W matrices for variance parameters (tau_1..tau_R, sigma2)."""
    prof: _Profile = fit._kr_parts["prof"]
    P = fit._kr_parts["parts"]
    n, X, Z = prof.n, prof.X, prof.Z
    s2 = fit.sigma2
    if prof.q:
        W = linalg.solve_triangular(P["L"], (Z * P["lam"][None, :]).T, lower=True,
                                    check_finite=False).T
        Vinv = (np.eye(n) - W @ W.T) / s2
    else:
        Vinv = np.eye(n) / s2
    Phi = fit.vcov_beta
    VinvX = Vinv @ X
    VinvZ = Vinv @ Z
    comps = [("Z", sl) for sl in prof.slices] + [("I", None)]
    m = len(comps)

    def A(r):
        kind, sl = comps[r]
        return Z[:, sl].T @ VinvX if kind == "Z" else VinvX

    def B(r, s):
        (kr_, slr), (ks, sls) = comps[r], comps[s]
        if kr_ == "Z" and ks == "Z":
            return Z[:, slr].T @ VinvZ[:, sls]
        if kr_ == "Z":
            return VinvZ[:, slr].T
        if ks == "Z":
            return VinvZ[:, sls]
        return Vinv

    As = [A(r) for r in range(m)]
    PP = [-(a.T @ a) for a in As]
    QQ = {}
    IE2 = np.empty((m, m))
    for r in range(m):
        for s in range(r, m):
            Brs = B(r, s)
            QQ[r, s] = As[r].T @ Brs @ As[s]
            QQ[s, r] = QQ[r, s].T
            IE2[r, s] = IE2[s, r] = (np.sum(Brs * Brs) - 2 * np.sum(Phi * QQ[r, s].T)
                                     + np.trace(Phi @ PP[r] @ Phi @ PP[s]))
    return PP, QQ, IE2, Phi


def kenward_roger(fit: LmmFit):
    """Kenward-Roger adjusted covariance, denominator df and t-test p-values.

    Fills ``vcov_beta_kr``, ``df_kr`` and ``p_values`` on ``fit`` and returns
    them. All variance parameters enter, including those on the zero boundary.
    """
    if fit._kr_parts is None:
        raise LmmError("fit carries no REML internals")
    PP, QQ, IE2, Phi = _kr_matrices(fit)
    m = len(PP)
    eig = np.linalg.eigvalsh(IE2)
    fallback = False
    if np.min(np.abs(eig)) > 1e-10:
        Wm = 2.0 * np.linalg.inv(IE2)
    else:
        Wm = 2.0 * np.linalg.pinv(IE2)
    Wm = 0.5 * (Wm + Wm.T)
    if np.min(np.linalg.eigvalsh(Wm)) < -1e-8 * max(1.0, np.max(np.abs(Wm))):
        fallback = True
    p = Phi.shape[0]
    UU = np.zeros((p, p))
    for r in range(m):
        for s in range(m):
            UU += Wm[r, s] * (QQ[r, s] - PP[r] @ Phi @ PP[s])
    PhiA = Phi + 2.0 * Phi @ UU @ Phi
    PhiA = 0.5 * (PhiA + PhiA.T)
    if fallback:
        warnings.warn("variance-parameter covariance not PSD; using model-based covariance")
        PhiA = Phi.copy()
    df = np.array([kr_ddf(np.eye(p)[i], Phi, PP, Wm) for i in range(p)])
    se = np.sqrt(np.diag(PhiA))
    with np.errstate(divide="ignore", invalid="ignore"):
        tval = fit.beta / se
    pv = 2.0 * stats.t.sf(np.abs(tval), df)
    fit.vcov_beta_kr, fit.df_kr, fit.p_values, fit.kr_fallback = PhiA, df, pv, fallback
    fit._kr_parts["W"] = Wm
    fit._kr_parts["PP"] = PP
    return PhiA, df, pv


def kr_ddf(L: np.ndarray, Phi: np.ndarray, PP: Sequence[np.ndarray], Wm: np.ndarray) -> float:
    """Kenward-Roger denominator degrees of freedom for the contrast rows ``L``."""
    L = np.atleast_2d(np.asarray(L, dtype=float))
    q = np.linalg.matrix_rank(L)
    Theta = L.T @ np.linalg.solve(L @ Phi @ L.T, L)
    TPhi = Theta @ Phi
    m = len(PP)
    us = [TPhi @ PP[r] @ Phi for r in range(m)]
    A1 = A2 = 0.0
    for r in range(m):
        for s in range(m):
            A1 += Wm[r, s] * np.trace(us[r]) * np.trace(us[s])
            A2 += Wm[r, s] * np.sum(us[r] * us[s].T)
    if A2 <= 0:
        return math.inf
    B = (A1 + 6 * A2) / (2 * q)
    g = ((q + 1) * A1 - (q + 4) * A2) / ((q + 2) * A2)
    den = 3 * q + 2 * (1 - g)
    c1, c2, c3 = g / den, (q - g) / den, (q + 2 - g) / den
    V0 = 1 + c1 * B
    V1 = 1 - c2 * B
    V2 = 1 - c3 * B
    if abs(V0) < 1e-10:
        V0 = 0.0
    ratio = (1 - A2 / q) / V1 if V1 != 0 else 0.0
    rho = ratio ** 2 * V0 / (q * V2)
    return 4 + (q + 2) / (q * rho - 1)
