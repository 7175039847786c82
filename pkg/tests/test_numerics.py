import gc

import numpy as np
import pytest
from hypothesis import given, strategies as st

from speechformer import numerics as nx
from speechformer.numerics import Tensor


def rand(rng, *shape):
    return Tensor(rng.standard_normal(shape))


def conv1d_loops(x, w, b, stride, left, right):
    """Direct triple loop over output frames, taps and channels."""
    xp = np.concatenate([np.zeros((left, x.shape[1])), x, np.zeros((right, x.shape[1]))])
    K = w.shape[0]
    t_out = (len(xp) - K) // stride + 1
    out = np.zeros((t_out, w.shape[2]))
    for t in range(t_out):
        for k in range(K):
            out[t] += xp[t * stride + k] @ w[k]
    return out + b


class TestBackwardBasics:
    def test_scalar_required(self, rng):
        x = Tensor(rng.standard_normal(3), requires_grad=True)
        with pytest.raises(ValueError, match="scalar"):
            nx.backward(nx.mul(x, 2.0))

    def test_shared_subexpression_accumulates(self):
        x = nx.parameter(np.array([3.0]))
        y = nx.mul(x, x)
        nx.backward(nx.sum_(nx.add(y, y)))
        assert x.grad[0] == pytest.approx(12.0)

    def test_leaf_grads_accumulate_across_calls(self):
        x = nx.parameter(np.array([1.0, 2.0]))
        nx.backward(nx.sum_(x))
        nx.backward(nx.sum_(x))
        np.testing.assert_array_equal(x.grad, [2.0, 2.0])

    def test_no_grad_records_nothing(self, rng):
        x = nx.parameter(rng.standard_normal(4))
        with nx.no_grad():
            y = nx.exp(x)
        assert y._parents == () and not y.requires_grad

    def test_broadcast_add_unbroadcasts(self, rng):
        x = nx.parameter(rng.standard_normal((4, 3)))
        b = nx.parameter(rng.standard_normal(3))
        nx.backward(nx.sum_(nx.add(x, b)))
        np.testing.assert_array_equal(b.grad, np.full(3, 4.0))

    def test_graph_is_topological(self, rng):
        x = nx.parameter(rng.standard_normal(3))
        y = nx.relu(nx.mul(x, 2.0))
        z = nx.sum_(nx.add(y, x))
        order = nx.graph_of(z).nodes
        pos = {id(n): i for i, n in enumerate(order)}
        for n in order:
            for p in n._parents:
                if id(p) in pos:
                    assert pos[id(p)] < pos[id(n)]


class TestOpGradients:
    """Finite differences on every op at 1e-5 relative, across shapes."""

    SHAPES = [(1,), (5,), (2, 3), (3, 1), (4, 4), (1, 7), (2, 3, 4), (3, 2, 5), (2, 1, 3, 2), (6, 2)]

    @pytest.mark.parametrize("shape", SHAPES)
    def test_elementwise(self, rng, shape):
        a, b = rand(rng, *shape), rand(rng, *shape)
        pos = Tensor(rng.uniform(0.5, 2.0, shape))
        for f, inputs in [
            (nx.add, [a, b]),
            (nx.sub, [a, b]),
            (nx.mul, [a, b]),
            (nx.div, [a, pos]),
            (nx.exp, [a]),
            (nx.log, [pos]),
            (nx.sqrt, [pos]),
            (lambda x: nx.softmax(x, axis=-1), [a]),
            (lambda x: nx.log_softmax(x, axis=-1), [a]),
            (lambda x: nx.sum_(x, axis=0), [a]),
            (lambda x: nx.mean(x, axis=-1, keepdims=True), [a]),
            (lambda x: nx.transpose(x), [a]),
            (lambda x: nx.reshape(x, (-1,)), [a]),
        ]:
            report = nx.grad_check(f, inputs, tol=1e-5)
            assert report.passed, report.max_rel_error

    @pytest.mark.parametrize("shape", SHAPES)
    def test_relu_away_from_kink(self, rng, shape):
        x = rng.standard_normal(shape)
        x[np.abs(x) < 0.1] = 0.5
        assert nx.grad_check(nx.relu, [Tensor(x)], tol=1e-5).passed

    @pytest.mark.parametrize("shape", [(1, 1, 1), (2, 3, 4), (3, 5, 2), (2, 2, 6, 3)])
    def test_matmul_batched(self, rng, shape):
        a = rand(rng, *shape)
        b = rand(rng, shape[-1], 3)
        assert nx.grad_check(nx.matmul, [a, b], tol=1e-5).passed
        b3 = rand(rng, *shape[:-2], shape[-1], 2)
        assert nx.grad_check(nx.matmul, [a, b3], tol=1e-5).passed

    @pytest.mark.parametrize("shape", [(1, 2), (3, 4), (2, 3, 5), (2, 2, 2, 3)])
    def test_layer_norm(self, rng, shape):
        x, g, b = rand(rng, *shape), rand(rng, shape[-1]), rand(rng, shape[-1])
        report = nx.grad_check(lambda x, g, b: nx.layer_norm(x, g, b), [x, g, b], tol=1e-5)
        assert report.passed, report.max_rel_error

    @pytest.mark.parametrize("T,K,stride,pad", [(7, 3, 1, 1), (9, 5, 2, 2), (8, 8, 4, (0, 4)), (5, 1, 1, 0), (4, 5, 3, (1, 2))])
    def test_conv1d(self, rng, T, K, stride, pad):
        x, w, b = rand(rng, 2, T, 3), rand(rng, K, 3, 4), rand(rng, 4)
        report = nx.grad_check(lambda x, w, b: nx.conv1d(x, w, b, stride, pad), [x, w, b], tol=1e-5)
        assert report.passed, report.max_rel_error

    def test_indexing_ops(self, rng):
        w = rand(rng, 6, 3)
        ids = np.array([[0, 2, 2], [5, 0, 1]])
        assert nx.grad_check(lambda w: nx.take_rows(w, ids), [w], tol=1e-5).passed
        x = rand(rng, 2, 3, 5)
        idx = rng.integers(0, 5, size=(2, 3))
        assert nx.grad_check(lambda x: nx.gather_last(x, idx), [x], tol=1e-5).passed

    def test_concat_and_masked_fill(self, rng):
        a, b = rand(rng, 2, 3), rand(rng, 2, 4)
        assert nx.grad_check(lambda a, b: nx.concat([a, b], axis=1), [a, b], tol=1e-5).passed
        mask = rng.random((2, 3)) < 0.5
        assert nx.grad_check(lambda a: nx.masked_fill(a, mask, -3.0), [a], tol=1e-5).passed

    def test_dropout_with_fixed_mask(self, rng):
        x = rand(rng, 4, 5)
        seed = 9
        report = nx.grad_check(lambda x: nx.dropout(x, 0.3, np.random.default_rng(seed)), [x], tol=1e-5)
        assert report.passed


class TestConv1d:
    @given(T=st.integers(1, 12), K=st.integers(1, 5), stride=st.integers(1, 4),
           left=st.integers(0, 3), right=st.integers(0, 3), seed=st.integers(0, 10**6))
    def test_matches_loops(self, T, K, stride, left, right, seed):
        if T + left + right < K:
            return
        r = np.random.default_rng(seed)
        x, w, b = r.standard_normal((T, 2)), r.standard_normal((K, 2, 3)), r.standard_normal(3)
        got = nx.conv1d(Tensor(x), Tensor(w), Tensor(b), stride, (left, right)).data
        np.testing.assert_allclose(got, conv1d_loops(x, w, b, stride, left, right), atol=1e-12)
        assert got.shape[0] == nx.conv1d_output_length(T, K, stride, (left, right))

    def test_empty_output_rejected(self, rng):
        with pytest.raises(ValueError, match="empty output"):
            nx.conv1d(rand(rng, 2, 3), rand(rng, 4, 3, 1), None)

    def test_channel_mismatch(self, rng):
        with pytest.raises(ValueError, match="channel mismatch"):
            nx.conv1d(rand(rng, 5, 3), rand(rng, 2, 4, 1), None)


class TestMisc:
    def test_matmul_mismatch_names_shapes(self, rng):
        with pytest.raises(ValueError, match=r"\(2, 3\) x \(4, 5\)"):
            nx.matmul(rand(rng, 2, 3), rand(rng, 4, 5))

    def test_softmax_stable_for_large_inputs(self):
        out = nx.softmax(Tensor([[1000.0, 1000.0, -1000.0]])).data
        np.testing.assert_allclose(out, [[0.5, 0.5, 0.0]])

    def test_dropout_replays_and_scales(self):
        x = Tensor(np.ones((200, 50)))
        a = nx.dropout(x, 0.25, np.random.default_rng(3)).data
        b = nx.dropout(x, 0.25, np.random.default_rng(3)).data
        np.testing.assert_array_equal(a, b)
        assert set(np.unique(a)) <= {0.0, 1.0 / 0.75}
        assert abs(a.mean() - 1.0) < 0.02

    def test_dropout_needs_rng(self):
        with pytest.raises(ValueError, match="rng"):
            nx.dropout(Tensor(np.ones(3)), 0.1, None)
        assert nx.dropout(Tensor(np.ones(3)), 0.0, None).data.sum() == 3.0

    def test_track_memory_counts_live_floats(self):
        gc.collect()
        with nx.track_memory() as mem:
            a = Tensor(np.zeros(1000))
            b = Tensor(np.zeros(500))
            del a, b
        assert mem.peak == 1500

    def test_track_kinks(self):
        with nx.track_kinks() as k:
            nx.relu(Tensor([0.5, -0.003, 2.0]))
        assert k.margin == pytest.approx(0.003)

    def test_rel_error_floor(self):
        assert nx.rel_error(np.zeros(3), np.zeros(3)) == 0.0
        assert nx.rel_error(np.array([1.0]), np.array([1.1])) == pytest.approx(0.1 / 1.1)

    def test_grad_check_detects_wrong_gradient(self, rng):
        def bad(x):
            return nx._make(x.data ** 2, (x,), lambda g: (g * x.data,), "bad_square")

        report = nx.grad_check(bad, [rand(rng, 3)])
        assert not report.passed and report.worst > 0.1

    def test_sampled_check_on_small_mlp(self, rng):
        w1, w2 = nx.parameter(rng.standard_normal((4, 5))), nx.parameter(rng.standard_normal((5, 1)))
        x = Tensor(rng.standard_normal((6, 4)))
        report = nx.sampled_grad_check(lambda: nx.sum_(nx.matmul(nx.exp(nx.matmul(x, w1) * 0.1), w2)),
                                       {"w1": w1, "w2": w2}, entries=5)
        assert report.passed, report.max_rel_error
