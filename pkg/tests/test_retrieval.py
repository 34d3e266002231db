import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from rmarn.errors import ArgumentError
from rmarn.retrieval import RetrievalReport, evaluate_both, format_table, ranks, recall_at_k


def loop_ranks(s, gt):
    out = []
    for q, g in enumerate(gt):
        order = sorted(range(s.shape[1]), key=lambda j: (-s[q, j], j))
        out.append(order.index(g))
    return np.array(out)


def test_identity_is_perfect():
    rep = recall_at_k(np.eye(12))
    assert rep.r_at == {1: 100.0, 5: 100.0, 10: 100.0}
    assert rep.rsum == 300.0


def test_true_item_always_third():
    n = 12
    s = np.zeros((n, n))
    for q in range(n):
        s[q, q] = 0.5
        s[q, (q + 1) % n] = 0.9
        s[q, (q + 2) % n] = 0.8
    rep = recall_at_k(s)
    assert rep.r_at[1] == 0.0 and rep.r_at[5] == 100.0


def test_table_arithmetic():
    rep = RetrievalReport("text_to_point", {1: 31, 5: 61, 10: 69}, 100)
    assert rep.rsum == 161


def test_ranks_reproduce_table_row():
    # 100 queries whose true-item ranks give exactly 31 / 61 / 69 percent
    target = [0] * 31 + [3] * 30 + [7] * 8 + [20] * 31
    n_g = 40
    s = np.zeros((100, n_g))
    gt = np.arange(100) % n_g
    for q, rk in enumerate(target):
        others = [j for j in range(n_g) if j != gt[q]]
        s[q, others] = np.linspace(1.0, 0.5, n_g - 1)
        s[q, gt[q]] = np.inf if rk == 0 else s[q, others[rk - 1]] - 1e-6
    s[np.isinf(s)] = 2.0
    rep = recall_at_k(s, gt)
    assert (rep.r_at[1], rep.r_at[5], rep.r_at[10], rep.rsum) == (31.0, 61.0, 69.0, 161.0)


def test_ties_break_by_index():
    s = np.ones((3, 3))
    np.testing.assert_array_equal(ranks(s), [0, 1, 2])


def test_errors():
    with pytest.raises(ArgumentError):
        recall_at_k(np.eye(4))
    with pytest.raises(ArgumentError):
        recall_at_k(np.eye(12), ks=(5, 1))
    with pytest.raises(ArgumentError):
        recall_at_k(np.array([[np.nan, 0.0], [0.0, 1.0]]), ks=(1,))
    with pytest.raises(ArgumentError):
        recall_at_k(np.ones((2, 3)), ks=(1,))


def test_small_gallery_clips_with_warning(caplog):
    reports = evaluate_both(np.array([[0.3]]))
    assert reports["text_to_point"].r_at[1] == 100.0
    assert "smaller than k" in caplog.text


@settings(max_examples=1000, deadline=None)
@given(st.integers(1, 15), st.integers(0, 2**32 - 1))
def test_monotone_invariance_and_ordering(n, seed):
    rng = np.random.default_rng(seed)
    n_g = n + 10
    s = rng.standard_normal((n, n_g))
    if seed % 3 == 0:
        s = np.round(s, 1)  # force ties
    gt = rng.integers(0, n_g, n)
    base = recall_at_k(s, gt)
    r = base.r_at
    assert r[1] <= r[5] <= r[10]
    assert base.rsum == r[1] + r[5] + r[10]
    for f in (np.exp, lambda v: 3 * v + 1, np.arctan):
        assert recall_at_k(f(s), gt).r_at == r
    np.testing.assert_array_equal(ranks(s, gt), loop_ranks(s, gt))


@settings(max_examples=50, deadline=None)
@given(st.integers(10, 20), st.integers(0, 2**32 - 1))
def test_gallery_permutation_invariance(n, seed):
    rng = np.random.default_rng(seed)
    s = rng.standard_normal((n, n))
    perm = rng.permutation(n)
    inv = np.argsort(perm)
    assert recall_at_k(s[:, perm], inv).r_at == recall_at_k(s).r_at


def test_table_formatting_matches_json():
    reports = evaluate_both(np.eye(10) + 0.01 * np.random.default_rng(0).standard_normal((10, 10)))
    text = format_table(reports)
    for rep in reports.values():
        assert f"{rep.rsum:.2f}" in text
