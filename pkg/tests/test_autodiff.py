import zlib

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from tbcough import autodiff as ad
from tbcough.autodiff import Tensor

from oracles import central_difference, lstm_unfused


def T(x, grad=False):
    return Tensor(np.asarray(x, dtype=np.float64), requires_grad=grad)


class TestForwardExamples:
    def test_softmax_symmetric(self):
        np.testing.assert_allclose(ad.softmax(T([0.0, 0.0])).data, [0.5, 0.5])

    def test_relu(self):
        np.testing.assert_array_equal(ad.relu(T([-1.0, 2.0])).data, [0.0, 2.0])

    def test_matmul_row_sums(self):
        out = T(np.ones((2, 3))) @ T(np.ones((3, 1)))
        np.testing.assert_array_equal(out.data, [[3.0], [3.0]])


class TestBackwardExamples:
    def test_sum_gives_ones(self):
        x = T(np.random.default_rng(0).normal(size=(3, 4)), grad=True)
        x.sum().backward()
        np.testing.assert_array_equal(x.grad, np.ones((3, 4)))

    def test_sigmoid_at_zero(self):
        x = T([0.0], grad=True)
        ad.sigmoid(x).sum().backward()
        assert x.grad[0] == pytest.approx(0.25)

    def test_mse_linear_map_matches_finite_differences(self):
        rng = np.random.default_rng(1)
        X = rng.normal(size=(5, 2))
        Y = rng.normal(size=(5, 2))
        W0 = rng.normal(size=(2, 2))

        def loss_np(W):
            return float(np.mean((X @ W - Y) ** 2))

        W = T(W0, grad=True)
        d = T(X) @ W - T(Y)
        (d * d).mean().backward()
        numeric = central_difference(loss_np, W0, 1e-5)
        rel = np.abs(W.grad - numeric) / np.maximum(np.abs(numeric), 1e-8)
        assert rel.max() < 1e-4


class TestGradCheck:
    def test_linear_function_is_exact(self):
        c = np.random.default_rng(2).normal(size=(3, 3))
        err = ad.grad_check(lambda x: (x * c).sum(), np.random.default_rng(3).normal(size=(3, 3)))
        assert err < 1e-8

    def test_tanh_composition(self):
        p = np.random.default_rng(4).normal(size=(4,))
        err = ad.grad_check(lambda x: ad.tanh(ad.tanh(x) * 2.0 + x).sum(), p)
        assert err < 1e-4

    def test_rejects_bad_step_and_non_scalar(self):
        with pytest.raises(ValueError):
            ad.grad_check(lambda x: x.sum(), np.ones(2), step=0.0)
        with pytest.raises(ad.GraphError):
            ad.grad_check(lambda x: x * 2.0, np.ones(2))


# Every primitive: scalarised by a fixed random projection, checked on 100 draws.
def _unary(op, positive=False, avoid_zero=False):
    def make(rng):
        x = rng.normal(size=(3, 4))
        if positive:
            x = np.abs(x) + 0.5
        if avoid_zero:
            x = np.where(np.abs(x) < 0.1, x + 0.3, x)
        return [x], lambda a: op(a)
    return make


def _binary(op, b_shape=(3, 4), positive_b=False):
    def make(rng):
        a = rng.normal(size=(3, 4))
        b = rng.normal(size=b_shape)
        if positive_b:
            b = np.abs(b) + 0.5
        return [a, b], lambda x, y: op(x, y)
    return make


PRIMITIVES = {
    "add": _binary(ad.add),
    "add_broadcast_row": _binary(ad.add, (4,)),
    "sub": _binary(ad.sub),
    "mul": _binary(ad.mul),
    "mul_broadcast_col": _binary(ad.mul, (3, 1)),
    "div": _binary(ad.div, positive_b=True),
    "neg": _unary(ad.neg),
    "pow": _unary(lambda a: ad.power(a, 3.0)),
    "exp": _unary(ad.exp),
    "log": _unary(ad.log, positive=True),
    "sqrt": _unary(ad.sqrt, positive=True),
    "tanh": _unary(ad.tanh),
    "sigmoid": _unary(ad.sigmoid),
    "relu": _unary(ad.relu, avoid_zero=True),
    "sum_axis": _unary(lambda a: ad.tsum(a, axis=1)),
    "mean_keepdims": _unary(lambda a: ad.tmean(a, axis=0, keepdims=True)),
    "reshape": _unary(lambda a: ad.reshape(a, (2, 6))),
    "transpose": _unary(ad.transpose),
    "getitem_slice": _unary(lambda a: a[1:, ::2]),
    "getitem_fancy": _unary(lambda a: a[np.array([0, 2, 2]), :]),
    "concat": _binary(lambda a, b: ad.concat([a, b], axis=1)),
    "stack": _binary(lambda a, b: ad.stack([a, b], axis=0)),
    "matmul": _binary(ad.matmul, (4, 2)),
    "softmax": _unary(lambda a: ad.softmax(a, axis=1)),
    "masked_softmax": _unary(lambda a: ad.masked_softmax(
        a, np.array([[1, 1, 0, 0], [1, 1, 1, 1], [1, 0, 0, 0]], bool))),
    "log_softmax": _unary(lambda a: ad.log_softmax(a, axis=0)),
    "l2_normalize": _unary(ad.l2_normalize),
    "dropout": _unary(lambda a: ad.dropout(a, 0.5, np.random.default_rng(5), True)),
}


def _batched_matmul(rng):
    return [rng.normal(size=(2, 3, 4)), rng.normal(size=(2, 4, 2))], ad.matmul


def _matmul_3d_2d(rng):
    return [rng.normal(size=(2, 3, 4)), rng.normal(size=(4, 2))], ad.matmul


def _lstm(reverse):
    mask = np.array([[1, 1, 1], [1, 1, 0]], float)

    def make(rng):
        args = [rng.normal(size=(2, 3, 2)), rng.normal(size=(2, 12)) * 0.7,
                rng.normal(size=(3, 12)) * 0.7, rng.normal(size=(12,)) * 0.5]
        return args, lambda x, a, b, c: ad.lstm(x, mask, a, b, c, reverse=reverse)
    return make


PRIMITIVES.update({
    "matmul_batched": _batched_matmul,
    "matmul_3d_2d": _matmul_3d_2d,
    "lstm": _lstm(False),
    "lstm_reverse": _lstm(True),
})


@pytest.mark.parametrize("name", sorted(PRIMITIVES))
def test_primitive_gradients_match_finite_differences(name):
    rng = np.random.default_rng(zlib.crc32(name.encode()))
    worst = 0.0
    for _ in range(100):
        args, op = PRIMITIVES[name](rng)
        proj = rng.normal(size=op(*[T(a) for a in args]).shape)
        for k in range(len(args)):
            def f(x, k=k):
                ts = [T(a) for a in args]
                ts[k] = x
                return (op(*ts) * proj).sum()
            worst = max(worst, ad.grad_check(f, args[k], 1e-5))
    assert worst < 1e-4, f"{name}: max relative error {worst:.2e}"


class TestFusedLstmAgainstComposition:
    @pytest.mark.parametrize("reverse", [False, True])
    def test_outputs_and_gradients_agree(self, reverse):
        rng = np.random.default_rng(6)
        x = rng.normal(size=(3, 5, 4))
        mask = np.array([[1] * 5, [1, 1, 1, 0, 0], [1, 0, 0, 0, 0]], float)
        ws = [rng.normal(size=(4, 24)) * 0.5, rng.normal(size=(6, 24)) * 0.5, rng.normal(size=24) * 0.5]
        proj = rng.normal(size=(3, 5, 6))

        def run(fn):
            ts = [T(x, True)] + [T(w, True) for w in ws]
            out = fn(ts[0], mask, *ts[1:], reverse=reverse)
            (out * proj).sum().backward()
            return out.data, [t.grad for t in ts]

        out_a, grads_a = run(ad.lstm)
        out_b, grads_b = run(lstm_unfused)
        np.testing.assert_allclose(out_a, out_b, atol=1e-12)
        for ga, gb in zip(grads_a, grads_b):
            np.testing.assert_allclose(ga, gb, atol=1e-10)


class TestSoftmaxProperties:
    @settings(max_examples=100, deadline=None)
    @given(arrays(np.float64, st.tuples(st.integers(1, 5), st.integers(1, 6)),
                  elements=st.floats(-50, 50)))
    def test_rows_are_distributions(self, x):
        s = ad.softmax(T(x), axis=1).data
        assert np.all(s >= 0)
        np.testing.assert_allclose(s.sum(axis=1), 1.0, atol=1e-9)

    def test_masked_entries_exactly_zero(self):
        mask = np.array([[True, False, True]])
        s = ad.masked_softmax(T([[3.0, 100.0, -1.0]]), mask).data
        assert s[0, 1] == 0.0
        assert s.sum() == pytest.approx(1.0, abs=1e-12)


class TestDropout:
    def test_expectation_matches_unmasked(self):
        rng = np.random.default_rng(7)
        x = T(rng.uniform(0.5, 2.0, size=(20,)))
        draws = np.stack([ad.dropout(x, 0.5, rng, True).data for _ in range(10_000)])
        rel = abs(draws.sum(axis=1).mean() - x.data.sum()) / x.data.sum()
        assert rel < 0.02

    def test_disabled_is_identity(self):
        x = T(np.arange(4.0))
        assert ad.dropout(x, 0.5, np.random.default_rng(0), False) is x

    def test_seeded_masks_repeat(self):
        x = T(np.ones(50))
        a = ad.dropout(x, 0.5, np.random.default_rng(3), True).data
        b = ad.dropout(x, 0.5, np.random.default_rng(3), True).data
        np.testing.assert_array_equal(a, b)


class TestErrorsAndGraph:
    def test_shape_mismatch_names_node(self):
        with pytest.raises(ad.ShapeError, match=r"node \d+ \(matmul\)"):
            T(np.ones((2, 3))) @ T(np.ones((2, 3)))
        with pytest.raises(ad.ShapeError, match="add"):
            T(np.ones((2, 3))) + T(np.ones((3, 2)))

    def test_non_finite_reports_node(self):
        with np.errstate(divide="ignore"):
            with pytest.raises(ad.NonFiniteError, match=r"node \d+ \(log\)"):
                ad.log(T([0.0, 1.0]))

    def test_non_scalar_seed(self):
        x = T([1.0, 2.0], grad=True)
        with pytest.raises(ad.GraphError):
            ad.backward(x * 2.0)

    def test_backward_before_evaluate(self):
        g = ad.Graph(lambda b: {"y": b["x"].sum()})
        with pytest.raises(ad.GraphError):
            g.backward("y")

    def test_graph_evaluate_and_backward(self):
        g = ad.Graph(lambda b: {"y": (b["x"] * b["x"]).sum(), "z": b["x"] * 3.0})
        out = ad.evaluate(g, {"x": T([1.0, 2.0], True), "unused": T([5.0], True), "c": np.ones(1)})
        assert out["y"] == pytest.approx(5.0)
        grads = ad.gradients(g, "y")
        np.testing.assert_allclose(grads["x"], [2.0, 4.0])
        np.testing.assert_array_equal(grads["unused"], [0.0])
        assert "c" not in grads
        with pytest.raises(ad.GraphError):
            g.backward("z")

    def test_each_node_visited_once(self):
        x = T([2.0], grad=True)
        y = x * x
        z = y + y  # y reached along two paths
        order = ad.toposort([z])
        assert len(order) == len({n.id for n in order}) == 3
        z.backward()
        assert x.grad[0] == pytest.approx(8.0)
        assert all(order.index(p) < order.index(n) for n in order for p in n._parents)

    def test_deterministic(self):
        def run():
            rng = np.random.default_rng(11)
            x = T(np.linspace(-1, 1, 8), True)
            y = ad.dropout(ad.tanh(x), 0.5, rng, True).sum()
            y.backward()
            return y.data.copy(), x.grad.copy()
        a, b = run(), run()
        np.testing.assert_array_equal(a[0], b[0])
        np.testing.assert_array_equal(a[1], b[1])

    def test_deep_graph_no_recursion_limit(self):
        x = T([0.1], grad=True)
        y = x
        for _ in range(5000):
            y = y * 1.0001
        y.sum().backward()
        assert x.grad[0] == pytest.approx(1.0001 ** 5000)
