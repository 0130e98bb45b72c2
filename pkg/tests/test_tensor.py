import itertools

import numpy as np
import pytest
from hypothesis import given, strategies as st

from occlusion_attn import tensor as T
from occlusion_attn.gradcheck import check_case, default_cases

from conftest import leaf


def conv_loops(x, w, b, stride, pad):
    """Direct 6-loop cross-correlation; the reference the im2col path must match."""
    n, c, h, wd = x.shape
    o, _, kh, kw = w.shape
    xp = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    ho = (h + 2 * pad - kh) // stride + 1
    wo = (wd + 2 * pad - kw) // stride + 1
    out = np.zeros((n, o, ho, wo))
    for ni, oi, i, j in itertools.product(range(n), range(o), range(ho), range(wo)):
        acc = b[oi] if b is not None else 0.0
        for ci in range(c):
            for u in range(kh):
                for v in range(kw):
                    acc += xp[ni, ci, i * stride + u, j * stride + v] * w[oi, ci, u, v]
        out[ni, oi, i, j] = acc
    return out


class TestConv:
    def test_zero_input_gives_bias(self, f64, rng):
        b = rng.standard_normal(4)
        out = T.conv2d(np.zeros((2, 3, 5, 5)), rng.standard_normal((4, 3, 3, 3)), b, 1, 1)
        np.testing.assert_array_equal(out.data, np.broadcast_to(b[None, :, None, None], out.shape))

    def test_full_overlap_center(self, f64):
        out = T.conv2d(np.ones((1, 1, 3, 3)), np.ones((1, 1, 3, 3)), np.zeros(1), 1, 1)
        assert out.data[0, 0, 1, 1] == 9.0

    def test_matches_loop_oracle(self, f64, rng):
        x, w = rng.standard_normal((2, 3, 5, 5)), rng.standard_normal((4, 3, 3, 3))
        b = rng.standard_normal(4)
        np.testing.assert_allclose(T.conv2d(x, w, b, 1, 1).data, conv_loops(x, w, b, 1, 1),
                                   rtol=0, atol=1e-12)

    @pytest.mark.parametrize("trial", range(50))
    def test_loop_oracle_random_geometry(self, f64, trial):
        r = np.random.default_rng(trial)
        k = int(r.choice([1, 3, 5]))
        stride, pad = int(r.integers(1, 3)), int(r.integers(0, k // 2 + 1))
        h, w = int(r.integers(k, 8)), int(r.integers(k, 8))
        x = r.standard_normal((int(r.integers(1, 3)), int(r.integers(1, 4)), h, w))
        wt = r.standard_normal((int(r.integers(1, 4)), x.shape[1], k, k))
        b = r.standard_normal(wt.shape[0]) if trial % 2 else None
        np.testing.assert_allclose(T.conv2d(x, wt, b, stride, pad).data,
                                   conv_loops(x, wt, b, stride, pad), rtol=0, atol=1e-12)

    def test_shape_mismatch_names_both(self):
        with pytest.raises(ValueError, match=r"\(1, 2, 4, 4\).*\(3, 5, 3, 3\)"):
            T.conv2d(np.zeros((1, 2, 4, 4)), np.zeros((3, 5, 3, 3)))

    def test_non_finite_output_raises(self):
        with pytest.raises(T.NonFiniteError):
            T.conv2d(np.full((1, 1, 3, 3), np.inf), np.ones((1, 1, 1, 1)))


class TestPooling:
    def test_constant(self):
        x = np.full((2, 3, 4, 5), 1.75)
        for mode in ("max", "avg"):
            np.testing.assert_array_equal(T.pool_spatial(x, mode).data, 1.75)
            np.testing.assert_array_equal(T.pool_channel(x, mode).data, 1.75)

    def test_hand_values(self):
        x = np.array([[[[1.0, 2.0], [3.0, 4.0]]]])
        assert T.pool_spatial(x, "max").item() == 4.0
        assert T.pool_spatial(x, "avg").item() == 2.5
        y = np.array([1.0, 3.0]).reshape(1, 2, 1, 1)
        assert T.pool_channel(y, "max").item() == 3.0
        assert T.pool_channel(y, "avg").item() == 2.0

    def test_single_channel_identity(self, rng):
        x = rng.standard_normal((2, 1, 3, 4)).astype(np.float32)
        for mode in ("max", "avg"):
            np.testing.assert_array_equal(T.pool_channel(x, mode).data, x)

    def test_flat_loop_oracles(self, f64, rng):
        x = rng.standard_normal((2, 3, 4, 5))
        avg = T.pool_spatial(x, "avg").data
        mx = T.pool_channel(x, "max").data
        cavg = T.pool_channel(x, "avg").data
        for n, c in itertools.product(range(2), range(3)):
            total = 0.0
            for v in x[n, c].ravel():
                total += v
            assert abs(avg[n, c, 0, 0] - total / 20) < 1e-12
        for n, i, j in itertools.product(range(2), range(4), range(5)):
            vals = [x[n, c, i, j] for c in range(3)]
            assert mx[n, 0, i, j] == max(vals)
            assert abs(cavg[n, 0, i, j] - sum(vals) / 3) < 1e-12

    def test_max_tie_routes_to_first_row_major(self):
        x = leaf(np.array([[[[5.0, 1.0], [5.0, 5.0]]]]))
        T.backward(T.pool_spatial(x, "max").reshape(1))
        np.testing.assert_array_equal(x.grad, [[[[1.0, 0.0], [0.0, 0.0]]]])
        y = leaf(np.full((1, 3, 1, 1), 2.0))
        T.backward(T.sum_(T.pool_channel(y, "max")))
        np.testing.assert_array_equal(y.grad.ravel(), [1.0, 0.0, 0.0])

    def test_avg_backward_distributes(self):
        x = leaf(np.zeros((1, 1, 2, 3)))
        T.backward(T.sum_(T.pool_spatial(x, "avg")))
        np.testing.assert_allclose(x.grad, 1 / 6)

    def test_empty_extents_raise(self):
        with pytest.raises(ValueError):
            T.pool_spatial(np.zeros((1, 2, 0, 3)), "max")
        with pytest.raises(ValueError):
            T.pool_channel(np.zeros((1, 0, 2, 2)), "avg")


class TestActivations:
    def test_sigmoid_zero(self):
        assert T.sigmoid(np.zeros(1)).item() == 0.5

    def test_softmax_equal_logits(self):
        out = T.softmax_channel(np.zeros((2, 3, 4, 4)))
        np.testing.assert_allclose(out.data, 1 / 3, rtol=1e-6)

    def test_softmax_saturation(self):
        z = np.array([10.0, -10.0, -10.0]).reshape(1, 3, 1, 1)
        assert T.softmax_channel(z).data[0, 0, 0, 0] > 0.9999

    def test_softmax_channel_needs_two(self):
        with pytest.raises(ValueError):
            T.softmax_channel(np.zeros((1, 1, 2, 2)))

    @given(st.integers(0, 2**32 - 1), st.sampled_from([1.0, 100.0, 1e4]))
    def test_softmax_partition_large_logits(self, seed, scale):
        z = np.random.default_rng(seed).standard_normal((2, 3, 3, 3)) * scale
        s = T.softmax_channel(z.astype(np.float32)).data.sum(axis=1)
        np.testing.assert_allclose(s, 1.0, atol=1e-6)

    @given(st.lists(st.floats(-30, 30), min_size=1, max_size=20))
    def test_sigmoid_open_interval(self, values):
        # beyond |x| ~ 37 the float64 result rounds to exactly 0 or 1
        with T.precision(np.float64):
            out = T.sigmoid(np.array(values)).data
        assert ((out > 0) & (out < 1)).all()

    @given(st.lists(st.floats(-1e6, 1e6), min_size=1, max_size=20))
    def test_sigmoid_closed_interval_anywhere(self, values):
        out = T.sigmoid(np.array(values)).data
        assert ((out >= 0) & (out <= 1)).all()


class TestBatchNorm:
    def test_train_mode_standardizes(self, f64, rng):
        x = rng.standard_normal((4, 3, 5, 5)) * 3 + 2
        state = T.RunningStats.fresh(3)
        out = T.batchnorm(x, np.ones(3), np.zeros(3), state, True).data
        np.testing.assert_allclose(out.mean(axis=(0, 2, 3)), 0, atol=1e-6)
        np.testing.assert_allclose(out.var(axis=(0, 2, 3)), 1, atol=1e-6 + 1e-5)

    def test_eval_identity_stats(self, f64, rng):
        x = rng.standard_normal((2, 3, 4, 4))
        out = T.batchnorm(x, np.ones(3), np.zeros(3), T.RunningStats.fresh(3), False).data
        np.testing.assert_allclose(out, x / np.sqrt(1 + 1e-5), rtol=1e-12)

    def test_running_stats_momentum_unbiased(self, f64, rng):
        x = rng.standard_normal((2, 2, 3, 3))
        state = T.RunningStats.fresh(2)
        T.batchnorm(x, np.ones(2), np.zeros(2), state, True)
        np.testing.assert_allclose(state.mean, 0.1 * x.mean(axis=(0, 2, 3)))
        np.testing.assert_allclose(state.var, 0.9 + 0.1 * x.var(axis=(0, 2, 3), ddof=1))

    def test_train_needs_two_values(self):
        with pytest.raises(ValueError, match="N\\*H\\*W"):
            T.batchnorm(np.zeros((1, 2, 1, 1)), np.ones(2), np.zeros(2),
                         T.RunningStats.fresh(2), True)


class TestBackward:
    def test_sum_gives_ones(self, f64, rng):
        x = leaf(rng.standard_normal((3, 4)))
        T.backward(T.sum_(x))
        np.testing.assert_array_equal(x.grad, np.ones((3, 4)))

    def test_square_gives_2x(self, f64, rng):
        x = leaf(rng.standard_normal((3, 4)))
        T.backward(T.sum_(x * x))
        np.testing.assert_allclose(x.grad, 2 * x.data, rtol=1e-15)

    def test_non_scalar_loss_rejected(self):
        with pytest.raises(ValueError, match="scalar"):
            T.backward(leaf(np.zeros(3)) * 2.0)

    def test_two_branch_accumulation(self, f64, rng):
        """A node feeding two branches gets the sum of both branch gradients."""
        a = rng.standard_normal((2, 3))
        x = leaf(a)
        h = T.exp(x)
        T.backward(T.sum_(h * 3.0) + T.sum_(T.cos(h)))
        both = x.grad.copy()
        x1, x2 = leaf(a), leaf(a)
        T.backward(T.sum_(T.exp(x1) * 3.0))
        T.backward(T.sum_(T.cos(T.exp(x2))))
        np.testing.assert_allclose(both, x1.grad + x2.grad, rtol=1e-14)

    def test_unreachable_parameter_gets_zero(self, f64):
        used, unused = T.Parameter("a", np.ones(2)), T.Parameter("b", np.ones(2))
        T.backward(T.sum_(used * 2.0))
        np.testing.assert_array_equal(unused.grad, 0)
        np.testing.assert_array_equal(used.grad, 2)

    def test_no_grad_records_nothing(self):
        x = leaf(np.ones(2))
        with T.no_grad():
            y = x * 2.0
        assert not y.requires_grad and y.is_leaf

    def test_non_finite_detected(self):
        with pytest.raises(T.NonFiniteError):
            T.log(np.zeros(2))


class TestBroadcastMul:
    def test_times_ones_is_identity(self, rng):
        a = rng.standard_normal((2, 3)).astype(np.float32)
        np.testing.assert_array_equal(T.mul(a, np.ones((2, 3))).data, a)

    def test_map_scales_every_channel(self, f64, rng):
        att, x = rng.uniform(size=(1, 4, 4)), rng.standard_normal((5, 4, 4))
        out = T.mul(att, x).data
        for c in range(5):
            np.testing.assert_array_equal(out[c], att[0] * x[c])

    def test_explicit_tile_oracle(self, f64, rng):
        a, b = leaf(rng.standard_normal((3, 1, 4))), leaf(rng.standard_normal((1, 2, 4)))
        out = T.mul(a, b)
        np.testing.assert_allclose(out.data, np.tile(a.data, (1, 2, 1)) * np.tile(b.data, (3, 1, 1)),
                                   rtol=0, atol=1e-12)
        T.backward(T.sum_(out))
        np.testing.assert_allclose(a.grad, np.tile(b.data, (3, 1, 1)).sum(axis=1, keepdims=True),
                                   atol=1e-12)

    def test_incompatible_shapes(self):
        with pytest.raises(ValueError):
            T.mul(np.ones((2, 3)), np.ones((3, 2)))


PRIMITIVES = [c for c in default_cases() if c.tier == "primitive"]


@pytest.mark.parametrize("case", PRIMITIVES, ids=lambda c: c.name)
def test_primitive_finite_differences_100_seeds(case):
    worst = max(check_case(case, seed).max_rel_err for seed in range(100))
    assert worst < 1e-6


def test_dtype_default_and_precision_switch():
    assert T.get_default_dtype() == np.float32
    with T.precision(np.float64):
        assert T.Tensor([1.0]).dtype == np.float64
    assert T.Tensor([1.0]).dtype == np.float32
