"""Regenerate fixtures/lmm_b1_fixture.{csv,json}.

The cluster-period table comes from one simulated trial whose REML variance
components are both interior. Reference values are computed without the
package's solver: the REML criterion is written out with explicit n x n
matrices and maximised by scipy from several starts, statsmodels MixedLM is
fitted as a cross-check, and the Kenward-Roger quantities are evaluated with
dense matrices at the optimum.

Usage: python scripts/make_lmm_fixture.py
"""

import json
from pathlib import Path

import numpy as np
import pandas as pd
import statsmodels.formula.api as smf
from scipy import optimize, stats

from swgpc.datagen import BinaryEndpointParams, RngSpec, simulate_binary
from swgpc.design import make_uniform_design
from swgpc.gpc import cluster_period_table

ROOT = Path(__file__).resolve().parents[1] / "fixtures"


def make_table() -> pd.DataFrame:
    design = make_uniform_design(45, 5, 6)
    ds = simulate_binary(design, BinaryEndpointParams(0.3, 0.5, 0.025, 0.3, 0.5), 10,
                         RngSpec(20240607, 5))
    table = cluster_period_table(ds)
    table["period_pair"] = table["j1"] * 10 + table["j2"]
    return table


def statsmodels_fit(table: pd.DataFrame):
    model = smf.mixedlm("log_wo ~ dx + dj", table, groups=np.ones(len(table)),
                        vc_formula={"cluster": "0 + C(cluster)",
                                    "period_pair": "0 + C(period_pair)"},
                        re_formula="0")
    res = model.fit(reml=True, method="lbfgs", maxiter=5000, gtol=1e-12)
    vc = dict(zip(model.exog_vc.names, res.vcomp))
    return res, vc


def dense_matrices(table):
    y = table["log_wo"].to_numpy(float)
    n = y.size
    X = np.column_stack([np.ones(n), table["dx"], table["dj"]]).astype(float)
    Zc = pd.get_dummies(table["cluster"]).to_numpy(float)
    Zp = pd.get_dummies(table["period_pair"]).to_numpy(float)
    return y, X, [Zc @ Zc.T, Zp @ Zp.T, np.eye(n)]


def dense_reml_loglik(var, y, X, dV):
    n, p = X.shape
    V = sum(v * d for v, d in zip(var, dV))
    Vi = np.linalg.inv(V)
    XVX = X.T @ Vi @ X
    r = y - X @ np.linalg.solve(XVX, X.T @ Vi @ y)
    return -0.5 * (np.linalg.slogdet(V)[1] + np.linalg.slogdet(XVX)[1] + r @ Vi @ r
                   + (n - p) * np.log(2 * np.pi))


def dense_reml(table):
    """Maximise the dense REML criterion over log variances from several starts."""
    y, X, dV = dense_matrices(table)
    best = None
    for start in ([0.05, 0.01, 0.4], [0.01, 0.05, 0.3], [0.2, 0.2, 0.2], [0.001, 0.001, 1.0]):
        res = optimize.minimize(lambda z: -dense_reml_loglik(np.exp(z), y, X, dV),
                                np.log(start), method="Nelder-Mead",
                                options={"xatol": 1e-10, "fatol": 1e-12, "maxiter": 20000})
        res = optimize.minimize(lambda z: -dense_reml_loglik(np.exp(z), y, X, dV), res.x,
                                method="BFGS", options={"gtol": 1e-9})
        if best is None or res.fun < best.fun:
            best = res
    return np.exp(best.x), -best.fun


def dense_kenward_roger(table, beta_names, tau_cluster, tau_pp, sigma2):
    y, X, dV = dense_matrices(table)
    V = tau_cluster * dV[0] + tau_pp * dV[1] + sigma2 * dV[2]
    Vi = np.linalg.inv(V)
    Phi = np.linalg.inv(X.T @ Vi @ X)
    beta = Phi @ X.T @ Vi @ y
    Pm = Vi - Vi @ X @ Phi @ X.T @ Vi
    m = len(dV)
    Pr = [-X.T @ Vi @ d @ Vi @ X for d in dV]
    info = np.array([[0.5 * np.trace(Pm @ dV[r] @ Pm @ dV[s]) for s in range(m)] for r in range(m)])
    W = np.linalg.inv(info)
    Lam = np.zeros_like(Phi)
    for r in range(m):
        for s in range(m):
            Q = X.T @ Vi @ dV[r] @ Vi @ dV[s] @ Vi @ X
            Lam += W[r, s] * (Q - Pr[r] @ Phi @ Pr[s])
    PhiA = Phi + 2 * Phi @ Lam @ Phi
    out = {}
    for i, name in enumerate(beta_names):
        l = np.eye(3)[i]
        g = np.array([l @ Phi @ Pr[r] @ Phi @ l for r in range(m)])
        df = 2 * (l @ Phi @ l) ** 2 / (g @ W @ g)
        se = float(np.sqrt(PhiA[i, i]))
        out[name] = {"estimate": float(beta[i]), "se_model": float(np.sqrt(Phi[i, i])),
                     "se_kr": se, "df_kr": float(df),
                     "p_value": float(2 * stats.t.sf(abs(beta[i]) / se, df))}
    return out


def main():
    table = make_table()
    var, loglik = dense_reml(table)
    res, vc = statsmodels_fit(table)
    sm_var = np.array([vc["cluster"], vc["period_pair"], res.scale])
    names = ["intercept", "dx", "dj"]
    kr = dense_kenward_roger(table, names, *var)
    for i, name in enumerate(names):
        kr[name]["statsmodels_estimate"] = float(res.fe_params.iloc[i])
        kr[name]["statsmodels_se"] = float(res.bse_fe.iloc[i])
    ROOT.mkdir(exist_ok=True)
    cols = ["cluster", "sequence", "j1", "j2", "n_pairs", "n_win", "n_loss", "n_tie",
            "log_wo", "dx", "dj", "corrected"]
    table[cols].to_csv(ROOT / "lmm_b1_fixture.csv", index=False, float_format="%.17g")
    expected = {
        "model": "log_wo ~ 1 + dx + dj + (1|cluster) + (1|period_pair), REML",
        "reference": "dense REML maximised by scipy; Kenward-Roger from dense matrices",
        "variance_components": {"cluster": float(var[0]), "period_pair": float(var[1]),
                                "residual": float(var[2])},
        "reml_loglik": float(loglik),
        "statsmodels_variance_components": sm_var.tolist(),
        "statsmodels_max_rel_diff": float(np.max(np.abs(sm_var - var) / var)),
        "fixed": kr,
    }
    (ROOT / "lmm_b1_fixture.json").write_text(json.dumps(expected, indent=2) + "\n")
    print(json.dumps(expected, indent=2))


if __name__ == "__main__":
    main()
