import json

import numpy as np
import pytest
from hypothesis import given, strategies as st

from swgpc.design import (Dataset, DesignError, EndpointHierarchy, EndpointSpec, TrialDesign,
                          make_uniform_design, single_binary, treatment_indicator)


def test_uniform_design_layout(design):
    assert [design.sequence_of_cluster[k] for k in (1, 9, 10, 45)] == [1, 1, 2, 5]
    assert design.switch_period[1] == 2 and design.switch_period[5] == 6
    assert sum(1 for s in design.sequence_of_cluster.values() if s == 3) == 9


def test_smallest_stepped_wedge():
    d = make_uniform_design(2, 1, 2)
    assert d.treatment_matrix().tolist() == [[0, 1], [0, 1]]


def test_treatment_indicator_examples(design):
    k3 = 19  # sequence 3, switches at period 4
    assert design.sequence_of_cluster[k3] == 3
    assert treatment_indicator(design, k3, 3) == 0
    assert treatment_indicator(design, k3, 4) == 1
    assert treatment_indicator(design, 1, 2) == 1
    assert all(treatment_indicator(design, k, 1) == 0 for k in design.clusters)
    with pytest.raises(DesignError):
        treatment_indicator(design, 46, 1)
    with pytest.raises(DesignError):
        treatment_indicator(design, 1, 7)


def test_treated_cell_count_matches_enumeration(design):
    X = design.treatment_matrix()
    direct = sum(treatment_indicator(design, k, j) for k in design.clusters for j in design.periods)
    assert X.sum() == direct == 45 // 5 * (5 + 4 + 3 + 2 + 1) == 135
    assert X.size == 270


@given(st.integers(1, 6).flatmap(lambda S: st.tuples(st.just(S), st.integers(1, 5))))
def test_treatment_paths_monotone(sk):
    S, per = sk
    X = make_uniform_design(S * per, S).treatment_matrix()
    assert np.all(np.diff(X, axis=1) >= 0)
    assert np.all(X[:, 0] == 0) and np.all(X[:, -1] == 1)


def test_unbalanced_and_bad_designs_rejected():
    with pytest.raises(DesignError):
        make_uniform_design(44, 5)
    with pytest.raises(DesignError):
        make_uniform_design(45, 5, 7)
    with pytest.raises(DesignError):
        TrialDesign(2, 2, 1, {1: 1, 2: 1}, {1: 1}, ((0, 1), (1, 2)))
    with pytest.raises(DesignError):
        TrialDesign(2, 2, 1, {1: 1, 2: 1}, {1: 2}, ((0, 1), (1.5, 2)))


def test_design_dict_roundtrip(design):
    d = json.loads(json.dumps(design.to_dict()))
    assert TrialDesign.from_dict(d) == design
    d["extra"] = 1
    with pytest.raises(DesignError):
        TrialDesign.from_dict(d)


def test_endpoint_spec_validation():
    assert EndpointSpec("continuous", "higher").tie_threshold == 0.0
    with pytest.raises(DesignError):
        EndpointSpec("binary", tie_threshold=1.0)
    with pytest.raises(DesignError):
        EndpointSpec("continuous", tie_threshold=-1.0)
    with pytest.raises(DesignError):
        EndpointSpec("ordinal")
    with pytest.raises(DesignError):
        EndpointHierarchy(())
    with pytest.raises(DesignError):
        EndpointHierarchy((("a", EndpointSpec("binary")), ("a", EndpointSpec("binary"))))


def test_hierarchy_roundtrip_and_truncate():
    h = EndpointHierarchy((("d", EndpointSpec("binary", "lower")),
                           ("pam", EndpointSpec("continuous", "higher", 5.4))))
    assert EndpointHierarchy.from_dict(h.to_dict()) == h
    assert h.truncate(1).names == ["d"]


def test_dataset_sorts_and_validates(small_design):
    h = single_binary()
    cl = np.array([2, 1, 1])
    pe = np.array([1, 2, 1])
    X = small_design.treatment_matrix()[cl - 1, pe - 1]
    ds = Dataset(small_design, h, cl, pe, pe - 0.5, X, np.array([1.0, 0.0, 1.0]))
    assert ds.cluster.tolist() == [1, 1, 2] and ds.period.tolist() == [1, 2, 1]
    assert ds.outcomes[:, 0].tolist() == [1.0, 0.0, 1.0]
    assert not ds.outcomes.flags.writeable
    assert ds.cell_counts()[0, :2].tolist() == [1, 1]
    assert Dataset.from_records(small_design, h, list(ds.records())).outcomes.tolist() == \
        ds.outcomes.tolist()
    with pytest.raises(DesignError):
        Dataset(small_design, h, cl, pe, pe - 0.5, 1 - X, np.zeros(3))
    with pytest.raises(DesignError):
        Dataset(small_design, h, cl, pe, pe + 0.5, X, np.zeros(3))
    with pytest.raises(DesignError):
        Dataset(small_design, h, cl, pe, pe - 0.5, X, np.zeros((3, 2)))
