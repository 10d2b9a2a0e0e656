import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays
from oracles import logit_scalar, pearson_two_pass

from anchor_points.corr import (
    CorrelationModel,
    approximate_rank,
    correlation_matrix,
    logit,
    pearson_columns,
    rank_table,
)


def test_logit_values():
    assert logit(0.5) == 0.0
    assert logit(0.75) == pytest.approx(math.log(3), abs=1e-12)
    # clipped closed form evaluated independently
    expected = math.log((1 - 1e-6) / 1e-6)
    assert logit(1.0, 1e-6) == pytest.approx(expected, abs=1e-9)
    assert expected == pytest.approx(13.815509, abs=1e-6)
    assert logit(0.0) == pytest.approx(-expected, abs=1e-9)
    with pytest.raises(ValueError):
        logit(0.5, 0.0)


def test_identical_and_antilinear_columns():
    rng = np.random.default_rng(0)
    u = rng.uniform(0.05, 0.95, size=10)
    x = np.column_stack([u, u, 1.0 - u])  # logit(1 - u) = -logit(u)
    cm = correlation_matrix(x)
    assert cm.corr[0, 1] == pytest.approx(1.0, abs=1e-12)
    assert cm.dist[0, 1] == pytest.approx(0.0, abs=1e-12)
    assert cm.corr[0, 2] == pytest.approx(-1.0, abs=1e-12)
    assert cm.dist[0, 2] == pytest.approx(2.0, abs=1e-12)


def test_three_model_example():
    a, b = [0.6, 0.7, 0.8], [0.2, 0.5, 0.9]
    ref = pearson_two_pass([logit_scalar(v) for v in a], [logit_scalar(v) for v in b])
    cm = correlation_matrix(np.column_stack([a, b]))
    assert cm.corr[0, 1] == pytest.approx(ref, abs=1e-12)
    # frozen from the oracle; an earlier hand figure of 0.9946 does not reproduce
    assert ref == pytest.approx(0.9973524481, abs=1e-9)


def test_constant_column():
    x = np.array([[0.5, 0.2], [0.5, 0.4], [0.5, 0.9]])
    cm = correlation_matrix(x)
    assert cm.corr[0, 1] == 0.0 and cm.corr[0, 0] == 1.0 and cm.dist[0, 1] == 1.0


def test_needs_two_models():
    with pytest.raises(ValueError):
        correlation_matrix(np.array([[0.2, 0.3]]))


def test_save_load(tmp_path):
    rng = np.random.default_rng(1)
    cm = correlation_matrix(rng.uniform(size=(6, 5)))
    cm = CorrelationModel(cm.corr, cm.dist, cm.epsilon, cm.n_models, [f"e{i}" for i in range(5)])
    cm.save(tmp_path / "c.csv")
    back = CorrelationModel.load(tmp_path / "c.csv")
    np.testing.assert_array_equal(back.dist, cm.dist)
    assert back.example_ids == cm.example_ids and back.n_models == 6


def test_pearson_matches_oracle_random():
    rng = np.random.default_rng(2)
    x = rng.normal(size=(12, 20)) * rng.uniform(0.1, 10, size=20) + rng.normal(size=20) * 5
    c = pearson_columns(x)
    for i in range(20):
        for j in range(20):
            assert abs(c[i, j] - (1.0 if i == j else pearson_two_pass(x[:, i], x[:, j]))) < 1e-12


unit = st.floats(0.01, 0.99)


@settings(max_examples=40, deadline=None)
@given(arrays(np.float64, (6, 5), elements=unit))
def test_symmetry_and_distance_identity(x):
    cm = correlation_matrix(x)
    np.testing.assert_array_equal(cm.corr, cm.corr.T)
    np.testing.assert_array_equal(cm.dist, 1.0 - cm.corr)
    assert np.all(np.diag(cm.dist) == 0.0)


@settings(max_examples=40, deadline=None)
@given(
    arrays(np.float64, (7, 4), elements=unit),
    st.lists(st.floats(0.2, 5.0), min_size=4, max_size=4),
    st.lists(st.floats(-3.0, 3.0), min_size=4, max_size=4),
)
def test_affine_invariance_per_example(x, a, b):
    # a positive affine map of each example's logits leaves correlations unchanged
    z = logit(x)
    z2 = z * np.array(a) + np.array(b)
    x2 = 1.0 / (1.0 + np.exp(-z2))
    c1 = correlation_matrix(x).corr
    c2 = correlation_matrix(x2, eps=1e-12).corr
    live = np.ptp(z, axis=0) > 1e-6
    np.testing.assert_allclose(c1[np.ix_(live, live)], c2[np.ix_(live, live)], atol=1e-9)


def test_rank_examples():
    rng = np.random.default_rng(3)
    outer = np.outer(rng.normal(size=10), rng.normal(size=20))
    rep = approximate_rank(outer, 1e-6)
    assert rep.rank == 1 and rep.mae < 1e-8
    assert approximate_rank(np.eye(5) + 0.1, 1e-12).rank == 5
    with pytest.raises(ValueError):
        approximate_rank(outer, 0.0)


@settings(max_examples=30, deadline=None)
@given(arrays(np.float64, (5, 7), elements=st.floats(0, 1)), st.floats(1e-4, 0.3), st.floats(1e-4, 0.3))
def test_rank_monotone_in_threshold(m, t1, t2):
    lo, hi = sorted((t1, t2))
    r_lo, r_hi = approximate_rank(m, lo), approximate_rank(m, hi)
    assert r_hi.rank <= r_lo.rank
    assert 1 <= r_lo.rank <= 5 and r_lo.mae <= lo + 1e-12


@settings(max_examples=20, deadline=None)
@given(arrays(np.float64, (4, 6), elements=st.floats(0, 1)))
def test_rank_reconstruction_matches_full_decomposition(m):
    rep = approximate_rank(m, 1e-13)
    u, s, vt = np.linalg.svd(m, full_matrices=False)
    full = (u[:, : rep.rank] * s[: rep.rank]) @ vt[: rep.rank]
    assert np.mean(np.abs(full - m)) <= max(rep.mae, 1e-13) + 1e-8


def test_rank_table():
    out = rank_table({"a": np.ones((3, 3)), "b": np.eye(3)}, {"a": 1e-9, "b": 1e-9})
    assert out["a"].rank == 1 and out["b"].rank == 3
