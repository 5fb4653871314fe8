import math

import numpy as np
import pytest
from hypothesis import given, strategies as st

from swgpc import datagen
from swgpc.datagen import (LOGISTIC_VARIANCE, BinaryEndpointParams, ContinuousEndpointParams,
                           RngSpec, icc_roundtrip, simulate, simulate_binary, simulate_continuous,
                           variance_components)
from swgpc.design import make_uniform_design
from swgpc.gpc import win_stats
from swgpc.harness import ether_hierarchy, ether_params

PI2_3 = math.pi ** 2 / 3


def test_variance_component_examples():
    assert variance_components(0, 1) == (0.0, 0.0)
    c, p = variance_components(0.1, 1.0)
    assert c == pytest.approx(0.1 / 0.9 * 3.2898681336964524, rel=1e-14)
    assert c == pytest.approx(0.3655409, abs=1e-7) and p == 0.0
    c, p = variance_components(0.3, 0.5)
    assert c == pytest.approx(0.7049717, abs=1e-7) and p == pytest.approx(c, rel=1e-15)
    assert LOGISTIC_VARIANCE == pytest.approx(3.2898681, abs=1e-7)
    with pytest.raises(ValueError):
        variance_components(1.0, 0.5)
    with pytest.raises(ValueError):
        variance_components(0.1, 1.5)


def test_icc_roundtrip_examples():
    icc, cac = icc_roundtrip(*variance_components(0.1, 1.0))
    assert icc == pytest.approx(0.1, abs=1e-12) and cac == 1.0
    assert icc_roundtrip(0, 0) == (0.0, None)
    icc, cac = icc_roundtrip(0.7049717, 0.7049717)
    assert icc == pytest.approx(0.3, abs=1e-7) and cac == pytest.approx(0.5, abs=1e-12)


@given(st.floats(0, 0.99, allow_subnormal=False), st.floats(0, 1), st.floats(0.01, 500))
def test_roundtrip_is_identity(icc, cac, resid):
    c, p = variance_components(icc, cac, resid)
    assert c >= 0 and p >= 0 and math.isfinite(c) and math.isfinite(p)
    icc2, cac2 = icc_roundtrip(c, p, resid)
    assert icc2 == pytest.approx(icc, abs=1e-12)
    if icc > 0:
        assert cac2 == pytest.approx(cac, abs=1e-12)


def test_cac_one_makes_period_effect_degenerate(design):
    assert variance_components(0.3, 1.0)[1] == 0.0
    _, zeta = datagen._random_effects(design, 1.0, 0.0, RngSpec(3, 0), 0)
    assert not zeta.any()


def test_reproducible_and_stream_keyed(design):
    p = BinaryEndpointParams(0.2, 0.5, 0.05, 0.1, 0.75)
    a = simulate_binary(design, p, 10, RngSpec(99, 4))
    b = simulate_binary(design, p, 10, RngSpec(99, 4))
    c = simulate_binary(design, p, 10, RngSpec(99, 5))
    assert np.array_equal(a.outcomes, b.outcomes) and np.array_equal(a.time, b.time)
    assert not np.array_equal(a.outcomes, c.outcomes)
    assert a.n == 2700 and (a.cell_counts() == 10).all()


def test_adding_individuals_keeps_existing_draws(design):
    p = BinaryEndpointParams(0.3, 0.2, 0.0, 0.2, 0.5)
    small = simulate_binary(design, p, 10, RngSpec(5, 0))
    big = simulate_binary(design, p, 15, RngSpec(5, 0))
    keep = np.tile(np.r_[np.ones(10, bool), np.zeros(5, bool)], 45 * 6)
    assert np.array_equal(big.outcomes[keep], small.outcomes)
    assert np.array_equal(big.time[keep], small.time)


def test_times_within_periods(design):
    ds = simulate_binary(design, BinaryEndpointParams(0.2), 10, RngSpec(1, 0))
    assert np.all((ds.time >= ds.period - 1) & (ds.time < ds.period))


def test_null_marginal_rate_half(design):
    rates = [simulate_binary(design, BinaryEndpointParams(0.5), 10, RngSpec(7, r)).outcomes.mean()
             for r in range(40)]
    n = 40 * 2700
    assert abs(np.mean(rates) - 0.5) < 3 * math.sqrt(0.25 / n)


def test_ether_bleeding_control_rate(design):
    hier = ether_hierarchy()
    params = ether_params(0.0, 1.0, 0.0)
    assert params[2].p0 == 0.070 and params[2].delta == -0.816
    events = []
    for r in range(40):
        ds = simulate(design, hier, params, 10, RngSpec(11, r))
        events.append(ds.outcomes[ds.period == 1, 2])
    events = np.concatenate(events)
    assert abs(events.mean() - 0.070) < 3 * math.sqrt(0.07 * 0.93 / events.size)


def test_crude_win_odds_converges_to_closed_form(design):
    p = BinaryEndpointParams(0.2, 0.5, 0.0, 0.0, 1.0)
    wos = []
    for r in range(30):
        ds = simulate_binary(design, p, 40, RngSpec(13, r))
        y = ds.outcomes
        wos.append(win_stats(y[ds.treatment == 1], y[ds.treatment == 0], ds.hierarchy).wo)
    # closed form for these parameters; see the harness oracle
    assert np.mean(wos) == pytest.approx(1.20257, abs=0.02)


def test_continuous_mean_and_clamp(design):
    p = ContinuousEndpointParams(62.6, 5.0, 13.6, 0.0, 1.0, 0.0, 100.0)
    vals = [simulate_continuous(design, p, 10, RngSpec(17, r)) for r in range(10)]
    X = np.tile(simulate_binary(design, BinaryEndpointParams(0.5), 10,
                                RngSpec(0, 0)).treatment, 10)
    y = np.concatenate(vals)
    assert y.min() >= 0 and y.max() <= 100
    treated = y[X == 1]
    assert abs(treated.mean() - 67.6) < 3 * 13.6 / math.sqrt(treated.size)
    tight = ContinuousEndpointParams(62.6, 5.0, 13.6, 0.3, 0.5, 55.0, 70.0)
    y = simulate_continuous(design, tight, 10, RngSpec(1, 0))
    assert y.min() >= 55 and y.max() <= 70


def test_continuous_null_arms_match_in_law(design):
    p = ContinuousEndpointParams(50.0, 0.0, 10.0, 0.05, 1.0)
    X = simulate_binary(design, BinaryEndpointParams(0.5), 10, RngSpec(0, 0)).treatment
    diffs = []
    for r in range(30):
        y = simulate_continuous(design, p, 10, RngSpec(19, r))
        diffs.append(y[X == 1].mean() - y[X == 0].mean())
    assert abs(np.mean(diffs)) < 3 * np.std(diffs, ddof=1) / math.sqrt(len(diffs))


def test_latent_correlations_match_icc_and_cac(design):
    """Latent-scale correlation from the generated random effects plus logistic noise."""
    icc, cac = 0.3, 0.5
    s2c, s2p = variance_components(icc, cac)
    same, cross = [], []
    rng = np.random.default_rng(0)
    for r in range(200):
        eta, zeta = datagen._random_effects(design, s2c, s2p, RngSpec(23, r), 0)
        lat = eta[:, None, None] + zeta[:, :, None] + rng.logistic(size=(45, 6, 2))
        same.append(np.corrcoef(lat[:, :, 0].ravel(), lat[:, :, 1].ravel())[0, 1])
        cross.append(np.corrcoef(lat[:, 0, 0], lat[:, 3, 0])[0, 1])
    se_same = np.std(same, ddof=1) / math.sqrt(200)
    se_cross = np.std(cross, ddof=1) / math.sqrt(200)
    assert abs(np.mean(same) - icc) < 4 * se_same + 0.01
    assert abs(np.mean(cross) - cac * icc) < 4 * se_cross + 0.01


def test_parameter_validation():
    with pytest.raises(ValueError):
        BinaryEndpointParams(0.0)
    with pytest.raises(ValueError):
        ContinuousEndpointParams(0, 0, 0.0)
    with pytest.raises(ValueError):
        ContinuousEndpointParams(0, 0, 1.0, lo=1, hi=0)
    with pytest.raises(ValueError):
        simulate_binary(make_uniform_design(2, 1), BinaryEndpointParams(0.5), 0, RngSpec(0, 0))
