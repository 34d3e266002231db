import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from rmarn import afr
from rmarn.errors import ConfigError, DataError
from rmarn.numcore import Tensor, check_gradients, layer_norm


def make_layer(d, rng, ffn=None, dtype=np.float64):
    return afr.EncoderLayerParams.init(d, ffn or d, rng, dtype)


def naive_attention(x, layer, nhead):
    s, d = x.shape
    de = d // nhead
    q, k, v = x @ layer.w_q.data, x @ layer.w_k.data, x @ layer.w_v.data
    ctx = np.zeros((s, d))
    for h in range(nhead):
        cols = slice(h * de, (h + 1) * de)
        for a in range(s):
            scores = np.array([q[a, cols] @ k[b, cols] / np.sqrt(de) for b in range(s)])
            w = np.exp(scores - scores.max())
            w /= w.sum()
            for b in range(s):
                ctx[a, cols] += w[b] * v[b, cols]
    return ctx @ layer.w_o.data


def test_attention_matches_loop_oracle():
    rng = np.random.default_rng(0)
    layer = make_layer(8, rng)
    x = rng.standard_normal((3, 8))
    out = afr.self_attention(Tensor(x), layer, nhead=2)
    np.testing.assert_allclose(out.data, naive_attention(x, layer, 2), atol=1e-6)


def test_attention_single_token_ignores_query_key():
    rng = np.random.default_rng(1)
    layer = make_layer(4, rng)
    x = rng.standard_normal((1, 4))
    expected = x @ layer.w_v.data @ layer.w_o.data
    np.testing.assert_allclose(afr.self_attention(x, layer, 2).data, expected, atol=1e-12)


def test_attention_zero_qk_is_uniform():
    rng = np.random.default_rng(2)
    layer = make_layer(4, rng)
    layer.w_q.data[:] = 0
    layer.w_k.data[:] = 0
    layer.w_o.data = np.eye(4)
    x = rng.standard_normal((5, 4))
    out = afr.self_attention(x, layer, 1).data
    np.testing.assert_allclose(out, np.tile((x @ layer.w_v.data).mean(0), (5, 1)), atol=1e-12)


def test_attention_rejects_indivisible_heads():
    layer = make_layer(6, np.random.default_rng(3))
    with pytest.raises(ConfigError):
        afr.self_attention(np.ones((2, 6)), layer, 4)


def test_padded_batch_equals_unpadded():
    rng = np.random.default_rng(4)
    params = afr.AFRParams.init(5, 8, 2, 8, rng, np.float64)
    seqs = [rng.standard_normal((n, 5)) for n in (3, 6, 1)]
    batch, lengths = afr.pad_sequences(seqs, np.float64)
    out = afr.encode(batch, params, 2, lengths).data
    for i, s in enumerate(seqs):
        alone = afr.encode(s, params, 2).data
        np.testing.assert_allclose(out[i, : len(s)], alone, atol=1e-10)
        assert np.all(out[i, len(s):] == 0)


def test_feed_forward_zero_weights_gives_bias():
    layer = make_layer(4, np.random.default_rng(5))
    layer.w_1.data[:] = 0
    layer.w_2.data[:] = 0
    layer.b_2.data = np.array([1.0, -2.0, 0.5, 3.0])
    out = afr.feed_forward(np.random.default_rng(6).standard_normal((3, 4)), layer).data
    np.testing.assert_array_equal(out, np.tile(layer.b_2.data, (3, 1)))


def test_feed_forward_zero_input():
    layer = make_layer(4, np.random.default_rng(7))
    layer.b_2.data = np.arange(4.0)
    np.testing.assert_allclose(afr.feed_forward(np.zeros((2, 4)), layer).data, np.tile(np.arange(4.0), (2, 1)))


def test_zeroed_layer_reduces_to_layer_norm():
    rng = np.random.default_rng(8)
    layer = make_layer(6, rng)
    for name in ("w_q", "w_k", "w_v", "w_o", "w_1", "w_2"):
        getattr(layer, name).data[:] = 0
    x = rng.standard_normal((4, 6))
    out = afr.encoder_layer(Tensor(x), layer, 2).data
    ones, zeros = Tensor(np.ones(6)), Tensor(np.zeros(6))
    expected = layer_norm(layer_norm(Tensor(x), ones, zeros), ones, zeros).data
    np.testing.assert_array_equal(out, expected)


@settings(max_examples=15, deadline=None)
@given(st.integers(1, 7), st.integers(0, 10_000))
def test_encode_shape_and_permutation_equivariance(s, seed):
    rng = np.random.default_rng(seed)
    params = afr.AFRParams.init(3, 8, 2, 16, rng, np.float64)
    x = rng.standard_normal((s, 3))
    perm = rng.permutation(s)
    out = afr.encode(x, params, 4).data
    assert out.shape == (s, 8)
    np.testing.assert_allclose(afr.encode(x[perm], params, 4).data, out[perm], atol=1e-5)


def test_encode_is_deterministic_in_eval_mode():
    rng = np.random.default_rng(9)
    params = afr.AFRParams.init(3, 8, 2, 8, rng, np.float32)
    seq = afr.FeatureSequence(rng.standard_normal((5, 3)).astype(np.float32), "text", "a")
    a = afr.encode(seq, params, 2, dropout_rate=0.1, training=False).data
    b = afr.encode(seq, params, 2, dropout_rate=0.1, training=False).data
    assert a.tobytes() == b.tobytes()


def test_encode_width_mismatch():
    params = afr.AFRParams.init(3, 8, 1, 8, np.random.default_rng(0), np.float64)
    with pytest.raises(ConfigError):
        afr.encode(np.ones((2, 4)), params, 2)


def test_encode_gradients():
    rng = np.random.default_rng(10)
    params = afr.AFRParams.init(3, 4, 2, 6, rng, np.float64)
    x = rng.standard_normal((3, 3))
    w = Tensor(rng.standard_normal((3, 4)))
    report = check_gradients(lambda: (afr.encode(x, params, 2) * w).sum(), params.named("afr"), h=1e-6)
    assert report.max_rel_error < 1e-4, report.worst_param


def test_feature_sequence_validation():
    with pytest.raises(DataError):
        afr.FeatureSequence(np.zeros((0, 3)), "text")
    with pytest.raises(DataError):
        afr.FeatureSequence(np.array([[np.nan]]), "text")
    with pytest.raises(DataError):
        afr.FeatureSequence(np.zeros((2, 3)), "audio")
