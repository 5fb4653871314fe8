import json
import math
from pathlib import Path

import numpy as np
import pytest
from scipy import stats

from swgpc.datagen import BinaryEndpointParams, RngSpec, simulate_binary
from swgpc.design import Dataset, TrialDesign, make_uniform_design, single_binary
from swgpc.estimators import (METHODS, MethodError, method_a1, method_a2, method_b, method_c,
                              run_method, two_sided_p)

FIXTURES = Path(__file__).resolve().parents[1] / "fixtures"
TWO_ARM = TrialDesign(2, 3, 2, {1: 1, 2: 2}, {1: 2, 2: 3}, ((0, 1), (1, 2), (2, 3)))


def arms(treated, control):
    y = np.r_[treated, control].astype(float)
    cluster = np.r_[np.ones(len(treated), int), np.full(len(control), 2)]
    n = y.size
    return Dataset(TWO_ARM, single_binary(), cluster, np.full(n, 2), np.full(n, 1.5),
                   (cluster == 1).astype(int), y)


def test_a1_worked_example():
    res = method_a1(arms([1, 1, 0], [0, 0, 0]))
    assert res.wo_hat == pytest.approx(5.0, rel=1e-14)
    assert res.diagnostics["n_tie"] == 3


def test_a1_identical_outcomes():
    res = method_a1(arms([1, 1, 1], [1, 1]))
    assert res.delta_hat == 0.0 and res.wo_hat == 1.0 and res.p_value == 1.0


def test_a1_variance_matches_u_statistic_formula():
    rng = np.random.default_rng(3)
    t, c = rng.random(15) < 0.6, rng.random(12) < 0.4
    res = method_a1(arms(t, c))
    # placement-value variance of the probabilistic index, delta method to log odds
    h = np.array([[1.0 if a > b else 0.5 if a == b else 0.0 for b in c] for a in t])
    pi = h.mean()
    var = h.mean(1).var(ddof=1) / len(t) + h.mean(0).var(ddof=1) / len(c)
    assert res.std_err == pytest.approx(math.sqrt(var) / (pi * (1 - pi)), rel=1e-12)


def test_a1_equals_a2_single_cluster():
    d = make_uniform_design(1, 1, 2)
    ds = simulate_binary(d, BinaryEndpointParams(0.4, 0.5), 30, RngSpec(2, 0))
    a1, a2 = method_a1(ds), method_a2(ds)
    assert a2.delta_hat == a1.delta_hat
    assert a2.std_err == pytest.approx(a1.std_err, rel=1e-14)


def test_a2_symmetric_clusters_cancel():
    d = make_uniform_design(2, 1, 2)
    # cluster 1: treated {1,1,0} vs control {1,0,0}; cluster 2 mirrored
    y = [1, 0, 0, 1, 1, 0, 1, 1, 0, 1, 0, 0]
    cl = [1] * 6 + [2] * 6
    pe = [1, 1, 1, 2, 2, 2] * 2
    ds = Dataset(d, single_binary(), cl, pe, [p - 0.5 for p in pe],
                 [p - 1 for p in pe], y)
    assert method_a1(ds.subset(ds.cluster == 1)).wo_hat == pytest.approx(2.0, rel=1e-15)
    assert method_a1(ds.subset(ds.cluster == 2)).wo_hat == pytest.approx(0.5, rel=1e-15)
    res = method_a2(ds)
    assert res.delta_hat == 0.0


def test_a2_pair_weights():
    d = make_uniform_design(2, 1, 2)
    rng = np.random.default_rng(4)
    sizes = {(1, 1): 20, (1, 2): 40, (2, 1): 5, (2, 2): 7}
    cl, pe, y = [], [], []
    for (k, j), n in sizes.items():
        cl += [k] * n
        pe += [j] * n
        y += list((rng.random(n) < 0.3 + 0.2 * j).astype(float))
    cl, pe, y = np.array(cl), np.array(pe), np.array(y)
    ds = Dataset(d, single_binary(), cl, pe, pe - 0.5, pe - 1, y)
    logs = []
    for k in (1, 2):
        m = cl == k
        logs.append(method_a1(ds.subset(m)).delta_hat)
    w = np.array([20 * 40, 5 * 7], float)
    assert method_a2(ds).delta_hat == pytest.approx(np.dot(w / w.sum(), logs), rel=1e-13)
    assert w[0] / w.sum() == pytest.approx(800 / 835)


def test_b_constant_table_gives_zero():
    d = make_uniform_design(10, 5, 6)
    ds = simulate_binary(d, BinaryEndpointParams(0.5), 4, RngSpec(0, 0))
    flat = Dataset(ds.design, ds.hierarchy, ds.cluster, ds.period, ds.time, ds.treatment,
                   np.ones(ds.n))
    for v in ("b1", "b4"):
        res = method_b(flat, v)
        assert res.delta_hat == 0.0 and res.p_value == 1.0


def test_b1_reproduces_fixture(design):
    ref = json.loads((FIXTURES / "lmm_b1_fixture.json").read_text())["fixed"]["dx"]
    ds = simulate_binary(design, BinaryEndpointParams(0.3, 0.5, 0.025, 0.3, 0.5), 10,
                         RngSpec(20240607, 5))
    res = method_b(ds, "b1")
    assert res.delta_hat == pytest.approx(ref["estimate"], rel=1e-4)
    assert res.std_err == pytest.approx(ref["se_kr"], rel=1e-4)
    assert res.df == pytest.approx(ref["df_kr"], rel=1e-3)


def test_c1_two_group_equals_a1():
    rng = np.random.default_rng(9)
    ds = arms(rng.random(14) < 0.6, rng.random(17) < 0.4)
    c1, a1 = method_c(ds, "c1"), method_a1(ds)
    assert c1.delta_hat == pytest.approx(a1.delta_hat, abs=1e-6)
    assert "gamma" not in c1.diagnostics


@pytest.fixture(scope="module")
def all_results(null_dataset):
    return {m: run_method(m, null_dataset) for m in METHODS}


def test_every_method_runs_and_is_consistent(all_results):
    assert set(all_results) == set(METHODS)
    for m, r in all_results.items():
        assert r.method == m
        assert r.wo_hat > 0 and 0 <= r.p_value <= 1
        t = abs(r.delta_hat) / r.std_err
        ref = 2 * (stats.norm.sf(t) if math.isinf(r.df) else stats.t.sf(t, r.df))
        assert r.p_value == pytest.approx(ref, rel=1e-10, abs=1e-300)
        assert math.isinf(r.df) == (m[0] != "b")
        d = r.to_dict()
        json.dumps(d)
        assert d["wo_hat"] == r.wo_hat


def test_no_treatment_variation_fails_everywhere(null_dataset):
    control_only = null_dataset.subset(null_dataset.period == 1)
    for m in METHODS:
        with pytest.raises(MethodError) as err:
            run_method(m, control_only)
        assert err.value.method == m


def test_unknown_method():
    with pytest.raises(ValueError):
        run_method("z9", None)


def test_two_sided_p():
    assert two_sided_p(0.0, 0.0) == 1.0
    assert two_sided_p(1.96, 1.0) == pytest.approx(0.04999579, rel=1e-6)
    assert two_sided_p(2.0, 1.0, 10) == pytest.approx(2 * stats.t.sf(2.0, 10), rel=1e-14)
