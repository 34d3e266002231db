import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from rmarn import rls, simhead
from rmarn.errors import ArgumentError, ConfigError
from rmarn.numcore import Tensor, check_gradients


def head(k=2, seed=0, dtype=np.float64):
    return simhead.SimHeadParams.init(k, np.random.default_rng(seed), dtype)


def prox_grid(m, lam, step=1e-4):
    lo, hi = min(m, 0.0) - step, max(m, 0.0) + step
    xs = np.arange(lo, hi + step, step)
    return xs[np.argmin(0.5 * (m - xs) ** 2 + lam * np.abs(xs))]


def test_soft_piecewise_cases():
    assert simhead.soft(5, 2) == 3
    assert simhead.soft(-5, 2) == -3
    assert simhead.soft(1, 2) == 0


def test_soft_rejects_negative_lambda():
    with pytest.raises(ArgumentError):
        simhead.soft(1.0, -0.1)


@settings(max_examples=100, deadline=None)
@given(st.floats(-50, 50), st.floats(0, 10))
def test_soft_odd_shrinking_and_zero_lambda(x, lam):
    assert simhead.soft(-x, lam) == -simhead.soft(x, lam)
    assert abs(simhead.soft(x, lam)) <= abs(x)
    assert simhead.soft(x, 0.0) == x


def test_soft_is_prox_of_l1():
    rng = np.random.default_rng(0)
    for m, lam in zip(rng.uniform(-3, 3, 50), rng.uniform(0, 2, 50)):
        assert abs(simhead.soft(m, lam) - prox_grid(m, lam)) <= 1e-4


def test_lrf_identity_at_zero_lambda():
    p = head(3)
    p.set_lambda(0.0)
    m = np.random.default_rng(1).standard_normal((3, 4, 5))
    np.testing.assert_array_equal(simhead.lrf(Tensor(m), p).data, m)


def test_lrf_large_lambda_gives_zero_map():
    p = head(3)
    m = np.random.default_rng(2).standard_normal((3, 4, 5))
    p.set_lambda(float(np.abs(m).max()))
    assert np.all(simhead.lrf(rls.SimilarityMap(Tensor(m)), p).data == 0)


def test_lrf_rotation_matches_closed_form():
    th = math.radians(30)
    d = np.array([[math.cos(th), -math.sin(th)], [math.sin(th), math.cos(th)]])
    m = np.array([[[0.9, -0.2, 1.4], [0.1, 2.0, -0.7]],
                  [[-1.1, 0.3, 0.6], [0.8, -0.4, 1.5]]])
    p = head(2)
    p.lrf_D.data = d
    p.lrf_out.data = d.T
    p.set_lambda(0.5)
    # independent oracle: per cell, D^-1 soft(D m, lam) with explicit scalar branches
    expected = np.zeros_like(m)
    for a in range(2):
        for b in range(3):
            z = d @ m[:, a, b]
            z = np.array([v - 0.5 if v > 0.5 else v + 0.5 if v < -0.5 else 0.0 for v in z])
            expected[:, a, b] = np.linalg.inv(d) @ z
    np.testing.assert_allclose(simhead.lrf(Tensor(m), p).data, expected, atol=1e-10)


def test_scp_zero_map_zero_bias():
    p = head(2)
    assert simhead.scp(Tensor(np.zeros((2, 4, 5))), p).item() == 0.0


@pytest.mark.parametrize("shape", [(1, 1), (2, 7), (5, 3), (9, 9)])
def test_scp_scalar_for_any_size(shape):
    m = np.random.default_rng(3).standard_normal((2,) + shape)
    out = simhead.scp(Tensor(m), head(2))
    assert out.shape == ()
    assert np.isfinite(out.item())


def test_scp_degenerate_extent():
    with pytest.raises(ConfigError):
        simhead.scp(Tensor(np.zeros((1, 2, 3, 3))), head(2), extents=[[0, 3]])


def test_scp_deterministic():
    m = Tensor(np.random.default_rng(4).standard_normal((2, 4, 4)).astype(np.float32))
    p = head(2, dtype=np.float32)
    assert simhead.scp(m, p).data.tobytes() == simhead.scp(m, p).data.tobytes()


def test_scp_padded_batch_equals_single():
    rng = np.random.default_rng(5)
    p = head(2)
    maps = [rng.standard_normal((2, h, w)) for h, w in ((3, 5), (4, 2), (1, 6))]
    batch = np.zeros((3, 2, 4, 6))
    for i, m in enumerate(maps):
        batch[i, :, : m.shape[1], : m.shape[2]] = m
    ext = [m.shape[1:] for m in maps]
    out = simhead.scp(Tensor(batch), p, extents=ext).data
    for i, m in enumerate(maps):
        assert out[i] == pytest.approx(simhead.scp(Tensor(m), p).item(), abs=1e-12)


def test_scp_lrf_map_gradients():
    rng = np.random.default_rng(6)
    bundle = rls.ManifoldBundle.init(2, 3, 4, rng, np.float64)
    p = head(2, seed=7)
    p.set_lambda(0.05)
    t, q = rng.standard_normal((3, 4)), rng.standard_normal((4, 4))

    def f():
        return simhead.scp(simhead.lrf(rls.riemann_attention_map(t, q, bundle), p), p)

    params = dict(bundle.named("rls"), **{k: v for k, v in p.named("head").items() if "fuse" not in k})
    report = check_gradients(f, params, h=1e-6)
    assert report.max_rel_error < 1e-4, report.worst_param


def test_gps_identical_orthogonal_and_scale():
    rng = np.random.default_rng(8)
    t, p = rng.standard_normal((4, 3)), rng.standard_normal((6, 3))
    assert simhead.gps(t, t).item() == pytest.approx(1.0, abs=1e-12)
    a = np.array([[1.0, 0.0], [1.0, 0.0]])
    b = np.array([[0.0, 2.0]])
    assert simhead.gps(a, b).item() == 0.0
    assert simhead.gps(3.5 * t, p).item() == pytest.approx(simhead.gps(t, p).item(), abs=1e-6)


def test_gps_zero_vector_is_zero_not_nan(caplog):
    out = simhead.gps(np.zeros((2, 3)), np.ones((2, 3))).item()
    assert out == 0.0
    assert "zero pooled" in caplog.text


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 10_000))
def test_gps_bounded(seed):
    rng = np.random.default_rng(seed)
    v = simhead.gps(rng.standard_normal((3, 4)) * 100, rng.standard_normal((2, 4))).item()
    assert -1.0 - 1e-12 <= v <= 1.0 + 1e-12


def test_pool_max_ignores_padding():
    enc = Tensor(np.array([[[1.0, -5.0], [3.0, -7.0], [99.0, 99.0]]]))
    np.testing.assert_array_equal(simhead.pool_sequences(enc, [2], "max").data, [[3.0, -5.0]])


def test_fuse_linear():
    p = head(1)
    assert simhead.fuse(Tensor(2.0), Tensor(0.5), p).item() == 2.5
    p.fuse_w_gps.data[:] = 0
    assert simhead.fuse(Tensor(2.0), Tensor(0.5), p).item() == 2.0
    p.fuse_w_scp.data[:] = 0
    p.fuse_w_gps.data[:] = 1
    assert simhead.fuse(Tensor(2.0), Tensor(0.5), p).item() == 0.5


def test_lambda_stays_nonnegative():
    p = head(2)
    assert p.lambda_value == pytest.approx(0.1, rel=1e-12)
    p.lrf_lambda_raw.data = np.array(-50.0)
    assert p.lambda_value >= 0
