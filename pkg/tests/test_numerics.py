import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from periocount import numerics as nm
from periocount.numerics import Tensor


@pytest.fixture(autouse=True)
def high_precision():
    with nm.precision("high"):
        yield


def rng(seed=0):
    return np.random.default_rng(seed)


class TestMatmul:
    def test_identity(self):
        m = Tensor(rng(1).normal(size=(2, 2)))
        out = nm.matmul(Tensor(np.eye(2)), m)
        np.testing.assert_allclose(out.data, m.data)

    def test_hand_product(self):
        out = nm.matmul(Tensor([[1.0, 2.0], [3.0, 4.0]]), Tensor([[0.0], [1.0]]))
        np.testing.assert_allclose(out.data, [[2.0], [4.0]])

    def test_zero_case(self):
        out = nm.matmul(Tensor(np.zeros((3, 4))), Tensor(rng(2).normal(size=(4, 2))))
        np.testing.assert_allclose(out.data, np.zeros((3, 2)))

    def test_shape_mismatch_names_both_shapes(self):
        with pytest.raises(nm.DimensionError, match=r"\(2, 3\).*\(2, 2\)"):
            nm.matmul(Tensor(np.zeros((2, 3))), Tensor(np.zeros((2, 2))))

    def test_backward(self):
        a = Tensor(rng(3).normal(size=(2, 3)), requires_grad=True)
        b = Tensor(rng(4).normal(size=(3, 2)), requires_grad=True)
        out = nm.tsum(nm.matmul(a, b))
        out.backward()
        np.testing.assert_allclose(a.grad, np.ones((2, 2)) @ b.data.T)
        np.testing.assert_allclose(b.grad, a.data.T @ np.ones((2, 2)))

    def test_associativity_random_chains(self):
        g = rng(5)
        for _ in range(20):
            a = Tensor(g.normal(size=(3, 4)))
            b = Tensor(g.normal(size=(4, 5)))
            c = Tensor(g.normal(size=(5, 2)))
            left = nm.matmul(nm.matmul(a, b), c).data
            right = nm.matmul(a, nm.matmul(b, c)).data
            np.testing.assert_allclose(left, right, rtol=1e-5)


class TestSoftmax:
    def test_symmetry(self):
        out = nm.softmax(Tensor([2.5, 2.5, 2.5]), tau=0.3)
        np.testing.assert_allclose(out.data, [1 / 3, 1 / 3, 1 / 3])

    def test_single_element(self):
        out = nm.softmax(Tensor([7.0]), tau=2.0)
        np.testing.assert_allclose(out.data, [1.0])

    def test_hand_value(self):
        out = nm.softmax(Tensor([0.0, math.log(3.0)]), tau=1.0)
        np.testing.assert_allclose(out.data, [0.25, 0.75], atol=1e-12)

    def test_nonpositive_temperature_rejected(self):
        with pytest.raises(nm.ParameterError):
            nm.softmax(Tensor([1.0, 2.0]), tau=0.0)
        with pytest.raises(nm.ParameterError):
            nm.softmax(Tensor([1.0, 2.0]), tau=-1.0)

    def test_large_inputs_stable(self):
        out = nm.softmax(Tensor([1000.0, 1000.0 + math.log(3.0)]), tau=1.0)
        np.testing.assert_allclose(out.data, [0.25, 0.75], atol=1e-9)

    @given(st.lists(st.floats(-50, 50), min_size=1, max_size=8), st.floats(0.05, 5.0))
    @settings(max_examples=60, deadline=None)
    def test_distribution_property(self, values, tau):
        out = nm.softmax(Tensor(values), tau=tau).data
        assert abs(out.sum() - 1.0) < 1e-6
        assert np.all(out >= 0.0) and np.all(out <= 1.0)


class TestSigmoid:
    def test_zero(self):
        assert nm.sigmoid(Tensor(0.0)).item() == pytest.approx(0.5)

    def test_hand_value(self):
        assert nm.sigmoid(Tensor(math.log(3.0))).item() == pytest.approx(0.75, abs=1e-12)

    def test_antisymmetry(self):
        for x in rng(6).normal(scale=4.0, size=20):
            s = nm.sigmoid(Tensor(x)).item() + nm.sigmoid(Tensor(-x)).item()
            assert s == pytest.approx(1.0, abs=1e-12)

    def test_extreme_inputs(self):
        assert nm.sigmoid(Tensor(800.0)).item() == pytest.approx(1.0)
        assert nm.sigmoid(Tensor(-800.0)).item() == pytest.approx(0.0)


class TestCrossEntropy:
    def test_perfect_prediction(self):
        out = nm.cross_entropy(np.array([1.0, 0.0]), Tensor([1.0, 0.0]))
        assert out.item() == pytest.approx(0.0, abs=1e-9)

    def test_hand_values(self):
        assert nm.cross_entropy(np.array([1.0, 0.0]), Tensor([0.5, 0.5])).item() == pytest.approx(
            math.log(2.0), abs=1e-9
        )
        assert nm.cross_entropy(np.array([0.0, 1.0]), Tensor([0.25, 0.75])).item() == pytest.approx(
            -math.log(0.75), abs=1e-9
        )

    def test_length_mismatch(self):
        with pytest.raises(nm.DimensionError):
            nm.cross_entropy(np.array([1.0, 0.0, 0.0]), Tensor([0.5, 0.5]))

    def test_nonnegative(self):
        g = rng(7)
        for _ in range(30):
            p = nm.softmax(Tensor(g.normal(size=5)), tau=1.0)
            t = np.zeros(5)
            t[g.integers(5)] = 1.0
            assert nm.cross_entropy(t, p).item() >= 0.0


class TestBinaryCrossEntropy:
    def test_hand_values(self):
        assert nm.binary_cross_entropy(1, Tensor(0.5)).item() == pytest.approx(math.log(2.0))
        assert nm.binary_cross_entropy(0, Tensor(0.25)).item() == pytest.approx(-math.log(0.75))

    def test_perfect_positive(self):
        assert nm.binary_cross_entropy(1, Tensor(1.0 - 1e-15)).item() == pytest.approx(0.0, abs=1e-9)

    def test_clamps_instead_of_nan(self):
        assert math.isfinite(nm.binary_cross_entropy(1, Tensor(0.0)).item())
        assert math.isfinite(nm.binary_cross_entropy(0, Tensor(1.0)).item())


class TestAttention:
    def test_single_key_broadcasts_value(self):
        q = Tensor(rng(8).normal(size=(3, 4)))
        k = Tensor(rng(9).normal(size=(1, 4)))
        v = Tensor(rng(10).normal(size=(1, 4)))
        out = nm.scaled_dot_attention(q, k, v)
        np.testing.assert_allclose(out.data, np.repeat(v.data, 3, axis=0))

    def test_identical_keys_give_value_mean(self):
        q = Tensor(rng(11).normal(size=(2, 4)))
        k = Tensor(np.tile(rng(12).normal(size=(1, 4)), (5, 1)))
        v = Tensor(rng(13).normal(size=(5, 4)))
        out = nm.scaled_dot_attention(q, k, v)
        np.testing.assert_allclose(out.data, np.tile(v.data.mean(axis=0), (2, 1)), rtol=1e-9, atol=1e-12)

    def test_hand_computed_two_by_two(self):
        # d=1: scores are plain products; softmax rows then mix the values.
        q = Tensor([[1.0], [0.0]])
        k = Tensor([[1.0], [-1.0]])
        v = Tensor([[2.0], [4.0]])
        s0 = np.exp([1.0, -1.0])
        s0 /= s0.sum()
        expected0 = s0[0] * 2.0 + s0[1] * 4.0
        out = nm.scaled_dot_attention(q, k, v)
        np.testing.assert_allclose(out.data, [[expected0], [3.0]], rtol=1e-12)

    def test_dimension_mismatch(self):
        with pytest.raises(nm.DimensionError):
            nm.scaled_dot_attention(Tensor(np.zeros((2, 3))), Tensor(np.zeros((2, 4))), Tensor(np.zeros((2, 4))))


class TestGradCheck:
    def test_quadratic(self):
        x = Tensor(rng(14).normal(size=(3, 3)))
        err = nm.grad_check(lambda t: nm.tsum(nm.mul(t, t)), x, eps=1e-6)
        assert err < 1e-6

    def test_softmax_cross_entropy(self):
        g = rng(15)
        target = np.zeros(6)
        target[2] = 1.0
        x = Tensor(g.normal(size=6))
        err = nm.grad_check(lambda t: nm.cross_entropy(target, nm.softmax(t, tau=0.7)), x, eps=1e-5)
        assert err < 1e-4

    def test_nonfinite_rejected(self):
        with pytest.raises(nm.EvaluationError):
            nm.grad_check(lambda t: nm.log(t), Tensor([-1.0]), eps=1e-5)

    @pytest.mark.parametrize(
        "name,fn,shape",
        [
            ("sigmoid", lambda t: nm.tsum(nm.sigmoid(t)), (4,)),
            ("exp", lambda t: nm.tsum(nm.exp(t)), (3, 2)),
            ("gelu", lambda t: nm.tsum(nm.gelu(t)), (5,)),
            ("tanh", lambda t: nm.tsum(nm.tanh(t)), (4,)),
            ("rows_softmax", lambda t: nm.tsum(nm.mul(nm.rows_softmax(t), nm.Tensor(np.arange(8.0).reshape(2, 4)))), (2, 4)),
            ("div", lambda t: nm.tsum(nm.div(1.0, nm.add(nm.mul(t, t), 1.0))), (3,)),
            ("vecmax", lambda t: nm.vecmax(t), (6,)),
            ("layer_norm", lambda t: nm.tsum(nm.mul(nm.layer_norm(t, Tensor(np.ones((1, 4))), Tensor(np.zeros((1, 4)))), Tensor(np.arange(8.0).reshape(2, 4)))), (2, 4)),
            ("l2_normalize", lambda t: nm.tsum(nm.mul(nm.l2_normalize(t), Tensor(np.arange(4.0)))), (4,)),
        ],
    )
    def test_elementwise_ops(self, name, fn, shape):
        g = rng(hash(name) % 2**31)
        x = Tensor(g.normal(size=shape))
        assert nm.grad_check(fn, x, eps=1e-5) < 1e-4, name

    def test_attention_both_paths(self):
        g = rng(16)
        k = Tensor(g.normal(size=(3, 2)))
        v = Tensor(g.normal(size=(3, 2)))
        q = Tensor(g.normal(size=(2, 2)))
        w = Tensor(g.normal(size=(2, 2)))

        err_q = nm.grad_check(lambda t: nm.tsum(nm.mul(nm.scaled_dot_attention(t, k, v), w)), q)
        err_k = nm.grad_check(lambda t: nm.tsum(nm.mul(nm.scaled_dot_attention(q, t, v), w)), k)
        err_v = nm.grad_check(lambda t: nm.tsum(nm.mul(nm.scaled_dot_attention(q, k, t), w)), v)
        assert max(err_q, err_k, err_v) < 1e-4


class TestGraphMechanics:
    def test_grad_accumulates_on_reuse(self):
        x = Tensor([2.0], requires_grad=True)
        out = nm.tsum(nm.add(nm.mul(x, x), nm.mul(3.0, x)))
        out.backward()
        np.testing.assert_allclose(x.grad, [7.0])

    def test_broadcast_bias_gradient(self):
        b = Tensor(np.zeros((1, 3)), requires_grad=True)
        x = Tensor(rng(17).normal(size=(4, 3)))
        nm.tsum(nm.add(x, b)).backward()
        np.testing.assert_allclose(b.grad, np.full((1, 3), 4.0))

    def test_deep_graph_iterative_topo(self):
        x = Tensor([1.0], requires_grad=True)
        y = x
        for _ in range(3000):
            y = nm.add(y, 1.0)
        nm.tsum(y).backward()
        np.testing.assert_allclose(x.grad, [1.0])

    def test_embedding_rows_backward(self):
        table = Tensor(rng(18).normal(size=(5, 3)), requires_grad=True)
        out = nm.tsum(nm.embedding_rows(table, [1, 1, 4]))
        out.backward()
        expected = np.zeros((5, 3))
        expected[1] = 2.0
        expected[4] = 1.0
        np.testing.assert_allclose(table.grad, expected)

    def test_concat_narrow_roundtrip_gradient(self):
        a = Tensor(rng(19).normal(size=(2, 3)), requires_grad=True)
        b = Tensor(rng(20).normal(size=(1, 3)), requires_grad=True)
        joined = nm.concat([a, b], axis=0)
        nm.tsum(nm.narrow(joined, 0, 2, 3)).backward()
        np.testing.assert_allclose(a.grad, np.zeros((2, 3)))
        np.testing.assert_allclose(b.grad, np.ones((1, 3)))

    def test_precision_modes(self):
        with nm.precision("standard"):
            assert Tensor([1.0]).data.dtype == np.float32
        assert Tensor([1.0]).data.dtype == np.float64
        with pytest.raises(nm.ParameterError):
            nm.set_precision("half")
