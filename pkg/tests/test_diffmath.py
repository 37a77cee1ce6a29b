import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from unsegment import diffmath as dm
from unsegment.diffmath import Tape, Tensor
from unsegment.errors import DegenerateNormError, DimensionError, RankError

finite = st.floats(-3.0, 3.0, allow_nan=False)


def leaf(x):
    return Tensor(np.asarray(x, dtype=np.float64), requires_grad=True)


class TestTensor:
    def test_shape_matches_data(self):
        t = Tensor(np.zeros((2, 3, 4)))
        assert t.shape == (2, 3, 4)
        assert t.size == int(np.prod(t.shape))

    def test_float64(self):
        assert Tensor([1, 2, 3]).data.dtype == np.float64

    def test_constant_never_accumulates_grad(self):
        const = Tensor(np.ones(3))
        x = leaf(np.arange(3.0))
        dm.backward(dm.tsum(x * const))
        assert const.grad is None
        assert x.grad is not None


class TestConv2d:
    def test_identity_kernel(self, rng):
        x = rng.uniform(size=(1, 5, 6))
        out = dm.conv2d(x, np.ones((1, 1, 1, 1)))
        np.testing.assert_array_equal(out.data, x)

    def test_zero_input(self, rng):
        out = dm.conv2d(np.zeros((2, 5, 5)), rng.normal(size=(3, 2, 3, 3)), padding=1)
        assert not out.data.any()

    def test_hand_sum(self):
        out = dm.conv2d(np.array([[[1.0, 2.0], [3.0, 4.0]]]), np.ones((1, 1, 2, 2)))
        np.testing.assert_array_equal(out.data, [[[10.0]]])

    @pytest.mark.parametrize("h,k,stride,pad", [(8, 3, 2, 1), (7, 3, 1, 0), (9, 5, 3, 2)])
    def test_output_size(self, h, k, stride, pad):
        out = dm.conv2d(np.zeros((1, h, h)), np.zeros((2, 1, k, k)), stride=stride, padding=pad)
        expect = (h + 2 * pad - k) // stride + 1
        assert out.shape == (2, expect, expect)

    def test_matches_loop_reference(self, rng):
        x = rng.normal(size=(2, 6, 5))
        k = rng.normal(size=(3, 2, 3, 3))
        out = dm.conv2d(x, k, stride=2, padding=1).data
        xp = np.pad(x, ((0, 0), (1, 1), (1, 1)))
        for o in range(3):
            for i in range(out.shape[1]):
                for j in range(out.shape[2]):
                    window = xp[:, 2 * i:2 * i + 3, 2 * j:2 * j + 3]
                    assert out[o, i, j] == pytest.approx(np.sum(window * k[o]), abs=1e-12)

    def test_channel_mismatch_names_axes(self):
        with pytest.raises(DimensionError, match="axis"):
            dm.conv2d(np.zeros((2, 4, 4)), np.zeros((1, 3, 3, 3)))

    def test_kernel_too_large(self):
        with pytest.raises(DimensionError):
            dm.conv2d(np.zeros((1, 2, 2)), np.zeros((1, 1, 3, 3)))


class TestGridSample:
    def test_identity_grid_bit_exact(self, rng):
        x = rng.uniform(size=(3, 5, 4))
        rows, cols = np.meshgrid(np.arange(5.0), np.arange(4.0), indexing="ij")
        out = dm.grid_sample(x, np.stack([rows, cols], -1))
        np.testing.assert_array_equal(out.data, x)

    def test_center_is_average(self):
        x = np.array([[[1.0, 2.0], [3.0, 4.0]]])
        out = dm.grid_sample(x, np.array([[[0.5, 0.5]]]))
        assert out.data[0, 0, 0] == pytest.approx(2.5, abs=1e-15)

    def test_out_of_range_clamps(self):
        x = np.array([[[1.0, 2.0], [3.0, 4.0]]])
        out = dm.grid_sample(x, np.array([[[-1.0, 0.0]]]))
        assert out.data[0, 0, 0] == 1.0

    def test_clamped_coordinate_has_zero_grad(self):
        x = np.array([[[1.0, 2.0], [3.0, 4.0]]])
        g = leaf([[[-1.0, 0.5]]])
        (gg,) = dm.grad(dm.tsum(dm.grid_sample(x, g)), g)
        assert gg[0, 0, 0] == 0.0
        assert gg[0, 0, 1] == pytest.approx(1.0)

    @given(
        arrays(np.float64, (2, 4, 4), elements=finite),
        arrays(np.float64, (3, 3, 2), elements=st.floats(-2.0, 6.0, allow_nan=False)),
    )
    def test_convex_combination(self, x, grid):
        out = dm.grid_sample(x, grid).data
        u = np.clip(grid[..., 0], 0, 3)
        v = np.clip(grid[..., 1], 0, 3)
        r0, c0 = np.floor(u).astype(int), np.floor(v).astype(int)
        r1, c1 = np.minimum(r0 + 1, 3), np.minimum(c0 + 1, 3)
        corners = np.stack([x[:, r0, c0], x[:, r0, c1], x[:, r1, c0], x[:, r1, c1]])
        assert np.all(out >= corners.min(0) - 1e-12)
        assert np.all(out <= corners.max(0) + 1e-12)


class TestSeparableMap:
    def test_matches_per_channel_products(self, rng):
        x = rng.normal(size=(3, 4, 5))
        a, b = rng.normal(size=(6, 4)), rng.normal(size=(2, 5))
        out = dm.separable_map(x, a, b).data
        for c in range(3):
            np.testing.assert_allclose(out[c], a @ x[c] @ b.T, atol=1e-12)

    def test_upsampling_equals_grid_sample(self, rng):
        from unsegment.segmodel import upsample_matrix

        x = rng.normal(size=(2, 5, 3))
        rows, cols = np.meshgrid(np.arange(20) / 4, np.arange(12) / 4, indexing="ij")
        ref = dm.grid_sample(x, np.stack([rows, cols], -1)).data
        out = dm.separable_map(x, upsample_matrix(5), upsample_matrix(3)).data
        np.testing.assert_allclose(out, ref, atol=1e-14)

    def test_shape_mismatch(self):
        with pytest.raises(DimensionError):
            dm.separable_map(np.zeros((1, 3, 3)), np.zeros((4, 2)), np.zeros((4, 3)))


class TestCosine:
    def test_self(self):
        assert dm.cosine_similarity([3.0, -1.0], [3.0, -1.0]).item() == pytest.approx(1.0, abs=1e-15)

    def test_orthogonal(self):
        assert dm.cosine_similarity([1.0, 0.0], [0.0, 1.0]).item() == 0.0

    def test_diagonal(self):
        assert dm.cosine_similarity([1.0, 0.0], [1.0, 1.0]).item() == pytest.approx(0.7071067811865476, abs=1e-15)

    def test_zero_vector(self):
        with pytest.raises(DegenerateNormError):
            dm.cosine_similarity([0.0, 0.0], [1.0, 1.0])

    @given(arrays(np.float64, 6, elements=finite), arrays(np.float64, 6, elements=finite))
    def test_bounded(self, a, b):
        if np.linalg.norm(a) < 1e-6 or np.linalg.norm(b) < 1e-6:
            return
        c = dm.cosine_similarity(a, b).item()
        assert -1.0 - 1e-12 <= c <= 1.0 + 1e-12


class TestBackward:
    def test_sum_gives_ones(self, rng):
        x = leaf(rng.normal(size=(3, 4)))
        (g,) = dm.grad(dm.tsum(x), x)
        np.testing.assert_array_equal(g, np.ones((3, 4)))

    def test_square(self):
        x = leaf(3.0)
        (g,) = dm.grad(x * x, x)
        assert g == 6.0

    def test_cosine_grad_matches_central_difference(self):
        b = np.array([1.0, 1.0])
        a = np.array([1.0, 0.0])
        x = leaf(a)
        (g,) = dm.grad(dm.cosine_similarity(x, b), x)
        h = 1e-4
        for i in range(2):
            e = np.zeros(2)
            e[i] = h
            fd = (dm.cosine_similarity(a + e, b).item() - dm.cosine_similarity(a - e, b).item()) / (2 * h)
            assert abs(g[i] - fd) < 1e-6

    def test_non_scalar_rejected(self):
        x = leaf(np.ones(3))
        with pytest.raises(RankError):
            dm.backward(x * 2.0)

    def test_unused_leaf_gets_zero(self):
        x, y = leaf(np.ones(3)), leaf(np.ones(2))
        gx, gy = dm.grad(dm.tsum(x), x, y)
        np.testing.assert_array_equal(gy, np.zeros(2))

    def test_shared_node_visited_once(self):
        x = leaf(2.0)
        y = x * x
        z = y + y  # y feeds z twice; its vjp must run exactly once
        (g,) = dm.grad(z, x)
        assert g == 8.0
        tape = Tape(z)
        assert len({n.node_id for n in tape.nodes}) == len(tape.nodes)

    @given(arrays(np.float64, (3, 3), elements=finite))
    def test_linearity(self, data):
        def f1(x):
            return dm.tsum(dm.relu(x) * 2.0)

        def f2(x):
            return dm.tsum(dm.sigmoid(x) * x)

        x = leaf(data)
        (g1,) = dm.grad(f1(x), x)
        (g2,) = dm.grad(f2(x), x)
        (g12,) = dm.grad(f1(x) + f2(x), x)
        np.testing.assert_allclose(g12, g1 + g2, rtol=0, atol=1e-12)

    @given(arrays(np.float64, (2, 4, 4), elements=finite))
    def test_replay_bit_exact(self, data):
        x = leaf(data)
        k = np.linspace(-1, 1, 2 * 2 * 3 * 3).reshape(2, 2, 3, 3)
        out = dm.tsum(dm.relu(dm.conv2d(x, k, padding=1)) * dm.grid_sample(x, np.full((4, 4, 2), 1.3)))
        tape = Tape(out)
        first, second = tape.replay(), tape.replay()
        for node in tape.nodes:
            np.testing.assert_array_equal(first[node.node_id], node.data)
            np.testing.assert_array_equal(second[node.node_id], node.data)


class TestPrimitives:
    def test_clamp_straight_through(self):
        x = leaf([-2.0, 0.3, 2.0])
        (g,) = dm.grad(dm.tsum(dm.clamp(x, -1.0, 1.0)), x)
        np.testing.assert_array_equal(g, [0.0, 1.0, 0.0])

    def test_smoothed_sqrt_finite_at_zero(self):
        x = leaf(np.zeros(2))
        (g,) = dm.grad(dm.tsum(dm.sqrt(x)), x)
        assert np.all(np.isfinite(g))

    def test_broadcast_add_grad(self):
        a, b = leaf(np.zeros((3, 4))), leaf(np.zeros(4))
        ga, gb = dm.grad(dm.tsum(a + b), a, b)
        np.testing.assert_array_equal(gb, np.full(4, 3.0))

    def test_finite_diff_check_flags_wrong_gradient(self):
        def bad_square(x):
            return dm._apply("bad", lambda a: a * a, lambda g, out, xs, needs: (g * xs[0],), x)

        assert dm.finite_diff_check(lambda x: dm.tsum(bad_square(x)), np.array([0.7, -1.2])) > 0.1
