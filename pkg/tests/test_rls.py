import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from rmarn import rls
from rmarn.errors import ConfigError
from rmarn.numcore import Tensor, check_gradients


def bundle_for(k, r, d, seed, e_mode="off", capacity=(8, 8)):
    return rls.ManifoldBundle.init(k, r, d, np.random.default_rng(seed), np.float64, e_mode, capacity)


def loop_map(t, p, bundle):
    k = bundle.k
    out = np.zeros((k, len(t), len(p)))
    for i in range(k):
        for a in range(len(t)):
            for b in range(len(p)):
                e = bundle.e_table.data[i, a, b] if bundle.e_mode == "learned_bias" else 0.0
                out[i, a, b] = rls.token_similarity(t[a], p[b], bundle.A.data[i], bundle.B.data[i], e)
    return out


def test_token_similarity_identity_factors_is_dot():
    t, p = np.array([1.0, 2.0, 3.0]), np.array([-1.0, 0.5, 2.0])
    assert rls.token_similarity(t, p, np.eye(3), np.eye(3)) == pytest.approx(t @ p, abs=1e-15)


def test_token_similarity_zero_vector():
    a = np.random.default_rng(0).standard_normal((2, 3))
    assert rls.token_similarity(np.zeros(3), np.ones(3), a, a) == 0.0


def test_token_similarity_dense_oracle():
    rng = np.random.default_rng(1)
    a, b = rng.standard_normal((2, 3)), rng.standard_normal((2, 3))
    t, p = rng.standard_normal(3), rng.standard_normal(3)
    assert rls.token_similarity(t, p, a, b) == pytest.approx(t @ (a.T @ b) @ p, abs=1e-12)


def test_identity_bundle_gives_gram_matrix():
    rng = np.random.default_rng(2)
    t, p = rng.standard_normal((3, 4)), rng.standard_normal((5, 4))
    bundle = rls.ManifoldBundle(Tensor(np.eye(4)[None]), Tensor(np.eye(4)[None]))
    m = rls.riemann_attention_map(t, p, bundle)
    assert m.shape == (1, 3, 5)
    np.testing.assert_allclose(m.values.data[0], t @ p.T, atol=1e-14)


def test_map_matches_loop_oracle_random_instance():
    rng = np.random.default_rng(3)
    bundle = bundle_for(3, 4, 8, 4)
    t, p = rng.standard_normal((4, 8)), rng.standard_normal((5, 8))
    np.testing.assert_allclose(rls.riemann_attention_map(t, p, bundle).values.data, loop_map(t, p, bundle), atol=1e-10)


def test_map_with_position_bias_matches_loop():
    rng = np.random.default_rng(5)
    bundle = bundle_for(2, 3, 4, 6, "learned_bias", (6, 6))
    bundle.e_table.data = rng.standard_normal(bundle.e_table.shape)
    t, p = rng.standard_normal((4, 4)), rng.standard_normal((3, 4))
    np.testing.assert_allclose(rls.riemann_attention_map(t, p, bundle).values.data, loop_map(t, p, bundle), atol=1e-10)


def test_position_bias_capacity_exceeded():
    bundle = bundle_for(1, 2, 3, 0, "learned_bias", (2, 2))
    with pytest.raises(ConfigError):
        rls.riemann_attention_map(np.ones((3, 3)), np.ones((2, 3)), bundle)


def test_grid_matches_single_pair_maps():
    rng = np.random.default_rng(7)
    bundle = bundle_for(2, 3, 5, 8)
    tb, pb = rng.standard_normal((3, 4, 5)), rng.standard_normal((2, 6, 5))
    grid = rls.riemann_attention_grid(Tensor(tb), Tensor(pb), bundle).data
    assert grid.shape == (3, 2, 2, 4, 6)
    for i in range(3):
        for j in range(2):
            np.testing.assert_allclose(grid[i, j], rls.riemann_attention_map(tb[i], pb[j], bundle).values.data,
                                       atol=1e-12)


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 10_000), st.floats(-3, 3))
def test_map_is_bilinear(seed, alpha):
    rng = np.random.default_rng(seed)
    bundle = bundle_for(2, 3, 4, seed)
    t1, t2, p = rng.standard_normal((3, 4)), rng.standard_normal((3, 4)), rng.standard_normal((2, 4))

    def m(t, q):
        return rls.riemann_attention_map(t, q, bundle).values.data

    np.testing.assert_allclose(m(alpha * t1, p), alpha * m(t1, p), atol=1e-6)
    np.testing.assert_allclose(m(t1 + t2, p), m(t1, p) + m(t2, p), atol=1e-6)
    np.testing.assert_allclose(m(t1, alpha * p), alpha * m(t1, p), atol=1e-6)


def test_swapping_text_tokens_permutes_rows():
    rng = np.random.default_rng(9)
    bundle = bundle_for(3, 2, 4, 10)
    t, p = rng.standard_normal((4, 4)), rng.standard_normal((3, 4))
    swapped = t[[1, 0, 2, 3]]
    a = rls.riemann_attention_map(t, p, bundle).values.data
    b = rls.riemann_attention_map(swapped, p, bundle).values.data
    np.testing.assert_array_equal(b, a[:, [1, 0, 2, 3]])


def test_map_gradients():
    rng = np.random.default_rng(11)
    bundle = bundle_for(2, 3, 4, 12, "learned_bias", (4, 4))
    bundle.e_table.data = rng.standard_normal(bundle.e_table.shape)
    t = Tensor(rng.standard_normal((3, 4)), requires_grad=True, name="t")
    p = Tensor(rng.standard_normal((2, 4)), requires_grad=True, name="p")
    w = Tensor(rng.standard_normal((2, 3, 2)))
    params = dict(bundle.named("rls"), t=t, p=p)
    report = check_gradients(lambda: (rls.riemann_attention_map(t, p, bundle).values * w).sum(), params)
    assert report.max_rel_error < 1e-4
