import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from comad import autograd as ag
from comad.autograd import Tensor
from comad.errors import ConfigError, ContractError, DimensionError, NumericError


def leaf(x):
    return Tensor(np.asarray(x, dtype=np.float64), requires_grad=True)


finite = st.floats(-5, 5, allow_nan=False, allow_infinity=False)


class TestMatmul:
    def test_hand_example(self):
        out = ag.matmul(Tensor([[1.0, 2.0], [3.0, 4.0]]), Tensor([[5.0], [6.0]]))
        assert out.data.tolist() == [[17.0], [39.0]]

    def test_identity_and_zero(self):
        a = np.random.default_rng(0).standard_normal((3, 3))
        assert np.abs(ag.matmul(Tensor(np.eye(3)), Tensor(a)).data - a).max() <= 1e-12
        assert not ag.matmul(Tensor(a), Tensor(np.zeros((3, 3)))).data.any()

    def test_batched_broadcast(self):
        rng = np.random.default_rng(1)
        a, b = rng.standard_normal((4, 2, 3)), rng.standard_normal((3, 5))
        np.testing.assert_allclose(ag.matmul(Tensor(a), Tensor(b)).data, a @ b)

    def test_mismatch_names_both_shapes(self):
        with pytest.raises(DimensionError, match=r"\(2, 3\).*\(4, 1\)"):
            ag.matmul(Tensor(np.ones((2, 3))), Tensor(np.ones((4, 1))))

    def test_gradients(self):
        rng = np.random.default_rng(2)
        a, b = leaf(rng.standard_normal((2, 3, 4))), leaf(rng.standard_normal((4, 2)))
        w = rng.standard_normal((2, 3, 2))
        for x in (a, b):
            rep = ag.grad_check(lambda: ag.tsum(ag.matmul(a, b) * Tensor(w)), x)
            assert rep.passed, rep


class TestLayerNorm:
    def test_constant_vector_gives_zeros(self):
        out = ag.layer_norm(Tensor(np.full((1, 5), 3.0)), Tensor(np.ones(5)), Tensor(np.zeros(5)))
        assert np.abs(out.data).max() == 0.0

    def test_plus_minus_one(self):
        out = ag.layer_norm(Tensor([[1.0, -1.0]]), Tensor(np.ones(2)), Tensor(np.zeros(2)), eps=1e-12)
        np.testing.assert_allclose(out.data, [[1.0, -1.0]], atol=1e-10)

    def test_zero_gamma_gives_beta(self):
        x = np.random.default_rng(3).standard_normal((4, 6))
        out = ag.layer_norm(Tensor(x), Tensor(np.zeros(6)), Tensor(np.full(6, 0.7)))
        assert np.all(out.data == 0.7)

    def test_gradients(self):
        rng = np.random.default_rng(4)
        x, g, b = leaf(rng.standard_normal((3, 5))), leaf(rng.standard_normal(5)), leaf(rng.standard_normal(5))
        w = rng.standard_normal((3, 5))
        for t in (x, g, b):
            assert ag.grad_check(lambda: ag.tsum(ag.layer_norm(x, g, b) * Tensor(w)), t).passed


class TestSoftmax:
    def test_equal_inputs_uniform(self):
        np.testing.assert_allclose(ag.softmax(Tensor(np.full(4, 2.5))).data, 0.25)

    def test_sharp_temperature(self):
        p = ag.softmax(Tensor([1.0, 0.0]), temperature=0.1).data
        expect = 1 / (1 + math.exp(-10))
        assert abs(p[0] - expect) < 1e-12
        assert p[0] == pytest.approx(0.9999546, abs=1e-7)
        assert p[1] == pytest.approx(4.54e-5, abs=1e-7)

    def test_huge_temperature_near_uniform(self):
        p = ag.softmax(Tensor([3.0, -2.0]), temperature=1e6).data
        np.testing.assert_allclose(p, [0.5, 0.5], atol=1e-4)

    @pytest.mark.parametrize("t", [0.0, -1.0])
    def test_nonpositive_temperature(self, t):
        with pytest.raises(ConfigError):
            ag.softmax(Tensor([1.0, 2.0]), temperature=t)

    @settings(max_examples=50, deadline=None)
    @given(arrays(np.float64, (3, 6), elements=st.floats(-50, 50)), st.floats(0.05, 10))
    def test_rows_sum_to_one_f64(self, x, t):
        assert np.abs(ag.softmax(Tensor(x), temperature=t).data.sum(-1) - 1).max() <= 1e-12

    def test_rows_sum_to_one_f32(self):
        x = np.random.default_rng(5).standard_normal((100, 7)).astype(np.float32) * 10
        assert np.abs(ag.softmax(Tensor(x), temperature=0.1).data.sum(-1) - 1).max() <= 1e-6

    def test_log_softmax_gradient(self):
        x = leaf(np.random.default_rng(6).standard_normal((2, 5)))
        w = np.random.default_rng(7).standard_normal((2, 5))
        assert ag.grad_check(lambda: ag.tsum(ag.log_softmax(x, temperature=0.3) * Tensor(w)), x).passed


class TestCosine:
    def test_basic_values(self):
        a = Tensor([1.0, 2.0, 3.0])
        assert float(ag.cosine_similarity(a, a).data) == pytest.approx(1.0, abs=1e-12)
        assert float(ag.cosine_similarity(Tensor([1.0, 0.0]), Tensor([0.0, 4.0])).data) == 0.0

    @settings(max_examples=50, deadline=None)
    @given(arrays(np.float64, 4, elements=finite), arrays(np.float64, 4, elements=finite), st.floats(0.01, 100))
    def test_scale_invariance_and_range(self, a, b, lam):
        if np.linalg.norm(a) < 1e-3 or np.linalg.norm(b) < 1e-3:
            return
        c = float(ag.cosine_similarity(Tensor(a), Tensor(b)).data)
        c2 = float(ag.cosine_similarity(Tensor(lam * a), Tensor(b)).data)
        assert -1 - 1e-12 <= c <= 1 + 1e-12
        assert c2 == pytest.approx(c, abs=1e-9)

    def test_zero_vector_is_finite(self):
        assert float(ag.cosine_similarity(Tensor(np.zeros(3)), Tensor(np.ones(3))).data) == 0.0

    def test_gradient(self):
        rng = np.random.default_rng(8)
        a, b = leaf(rng.standard_normal((3, 4))), leaf(rng.standard_normal((3, 4)))
        for t in (a, b):
            assert ag.grad_check(lambda: ag.tsum(ag.cosine_similarity(a, b)), t).passed


class TestKL:
    def test_hand_value(self):
        kl = float(ag.kl_divergence(Tensor([0.75, 0.25]), Tensor([0.5, 0.5])).data)
        assert kl == pytest.approx(0.75 * math.log(1.5) + 0.25 * math.log(0.5), abs=1e-12)
        assert kl == pytest.approx(0.13081, abs=1e-5)

    def test_identical_is_zero(self):
        p = Tensor([0.2, 0.3, 0.5])
        assert float(ag.kl_divergence(p, p).data) == 0.0
        z = Tensor(np.random.default_rng(9).standard_normal((4, 6)))
        assert np.all(ag.kl_from_logits(z, z).data == 0.0)

    def test_gibbs_inequality(self):
        rng = np.random.default_rng(10)
        p = ag.softmax(Tensor(rng.standard_normal((1000, 5)) * 3))
        q = ag.softmax(Tensor(rng.standard_normal((1000, 5)) * 3))
        assert ag.kl_divergence(p, q).data.min() >= 0.0
        assert ag.kl_from_logits(Tensor(rng.standard_normal((1000, 5))), Tensor(rng.standard_normal((1000, 5)))).data.min() >= 0.0

    def test_unnormalized_rejected(self):
        with pytest.raises(ContractError):
            ag.kl_divergence(Tensor([0.6, 0.6]), Tensor([0.5, 0.5]))

    def test_zero_probability_terms(self):
        assert float(ag.kl_divergence(Tensor([1.0, 0.0]), Tensor([0.5, 0.5])).data) == pytest.approx(math.log(2))

    def test_softmax_kl_composite_gradient(self):
        rng = np.random.default_rng(11)
        a, b = leaf(rng.standard_normal((3, 4))), leaf(rng.standard_normal((3, 4)))
        for t in (a, b):
            assert ag.grad_check(lambda: ag.tsum(ag.kl_from_logits(a, b)), t).passed
            assert ag.grad_check(lambda: ag.tsum(ag.kl_divergence(ag.softmax(a), ag.softmax(b))), t).passed


class TestBackward:
    def test_sum_gives_ones(self):
        x = leaf(np.arange(6.0).reshape(2, 3))
        ag.backward(ag.tsum(x))
        assert np.all(x.grad == 1.0)

    def test_half_squared_norm(self):
        v = np.random.default_rng(12).standard_normal(5)
        x = leaf(v)
        ag.backward(ag.tsum(x * x) * 0.5)
        np.testing.assert_allclose(x.grad, v)

    def test_non_scalar_rejected(self):
        with pytest.raises(ContractError):
            ag.backward(leaf([1.0, 2.0]) * 2.0)

    def test_unused_parameter_gets_zero(self):
        x, unused = leaf([1.0, 2.0]), leaf([3.0])
        loss = ag.tsum(x * x)
        unused.grad = np.zeros(1)
        ag.backward(loss)
        assert np.all(unused.grad == 0)

    def test_shared_node_visited_once(self):
        x = leaf([2.0])
        y = x * x
        loss = ag.tsum(y + y)
        tape = ag.Tape.from_output(loss)
        assert len(tape.nodes) == len({id(n) for n in tape.nodes})
        ag.backward(loss)
        assert x.grad.tolist() == [8.0]

    def test_tape_is_topological(self):
        x = leaf([1.0, 2.0])
        loss = ag.tsum(ag.exp(x * 2.0) + x)
        order = {id(n): i for i, n in enumerate(ag.Tape.from_output(loss).nodes)}
        for node in ag.Tape.from_output(loss).nodes:
            for parent in node._parents:
                if id(parent) in order:
                    assert order[id(parent)] < order[id(node)]

    def test_composite_mlp_grad(self):
        rng = np.random.default_rng(13)
        x = Tensor(rng.standard_normal((4, 3)))
        w1, b1 = leaf(rng.standard_normal((5, 3))), leaf(rng.standard_normal(5))
        w2 = leaf(rng.standard_normal((2, 5)))

        def f():
            h = ag.gelu(ag.linear(x, w1, b1))
            return ag.tsum(ag.log_softmax(ag.linear(h, w2)) * Tensor(np.eye(2)[[0, 1, 1, 0]]))

        for p in (w1, b1, w2):
            assert ag.grad_check(f, p).max_rel_error <= 1e-4

    def test_no_grad_records_nothing(self):
        x = leaf([1.0])
        with ag.no_grad():
            y = x * 3.0
        assert y.is_leaf and not y.requires_grad


class TestFiniteness:
    def test_log_of_zero_raises(self):
        with pytest.raises(NumericError):
            ag.log(Tensor([0.0]))

    @settings(max_examples=30, deadline=None)
    @given(arrays(np.float64, (2, 4), elements=finite))
    def test_ops_preserve_finiteness(self, x):
        t = Tensor(x)
        for out in (ag.gelu(t), ag.softmax(t), ag.log_softmax(t), ag.exp(t), ag.layer_norm(t, Tensor(np.ones(4)), Tensor(np.zeros(4)))):
            assert np.isfinite(out.data).all()


class TestGradCheck:
    def test_linear_function_exact(self):
        x = leaf(np.random.default_rng(14).standard_normal(6))
        c = np.random.default_rng(15).standard_normal(6)
        rep = ag.grad_check(lambda: ag.tsum(x * Tensor(c)), x)
        assert rep.max_abs_error < 1e-9 and rep.checked == 6

    def test_detects_wrong_gradient(self):
        x = leaf([0.3, -0.7])
        wrong = lambda: ag._make(np.sum(x.data**2), (x,), lambda g: (g * x.data,), "wrong")  # noqa: E731
        assert not ag.grad_check(wrong, x).passed
