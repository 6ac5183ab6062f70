import numpy as np
import pytest

from comad import autograd as ag
from comad.adapter import Adapter, adapt
from comad.autograd import Tensor
from comad.errors import DimensionError


def test_zero_input_zero_output():
    a = Adapter(4, 3, 0, "f64")
    assert not a(Tensor(np.zeros((2, 5, 4)))).data.any()


def test_identity_projection_is_layer_norm():
    a = Adapter(4, 4, 0, "f64")
    a.weight.data = np.eye(4)
    x = Tensor(np.random.default_rng(0).standard_normal((2, 3, 4)))
    np.testing.assert_array_equal(a(x).data, ag.layer_norm(x, Tensor(np.ones(4)), Tensor(np.zeros(4))).data)


def test_hand_computed():
    a = Adapter(3, 2, 0, "f64")
    a.weight.data = np.array([[1.0, 0.0, 2.0], [0.0, -1.0, 1.0]])
    a.bias.data = np.array([0.0, 1.0])
    out = a(Tensor([[1.0, 2.0, 3.0]])).data[0]
    # W z + b = (7, 2); mean 4.5, var 6.25 -> (+1, -1)
    np.testing.assert_allclose(out, [1.0, -1.0], atol=1e-6)


def test_output_normalized():
    a = Adapter(16, 8, 1, "f64")
    z = np.random.default_rng(1).standard_normal((4, 5, 16))
    out = a(Tensor(z)).data
    pre = (z @ a.weight.data.T + a.bias.data).var(-1)
    np.testing.assert_allclose(out.mean(-1), 0, atol=1e-5)
    # variance falls short of 1 only by the layer-norm epsilon
    np.testing.assert_allclose(out.var(-1), pre / (pre + 1e-6), atol=1e-9)
    a.weight.data = np.random.default_rng(2).standard_normal((8, 16))
    np.testing.assert_allclose(a(Tensor(z)).data.var(-1), 1, atol=1e-5)


def test_dim_mismatch():
    with pytest.raises(DimensionError):
        adapt(Tensor(np.zeros((1, 2, 5))), Adapter(4, 3))


def test_gradient_reaches_adapter_not_input():
    a = Adapter(6, 4, 2, "f64")
    teacher_tokens = Tensor(np.random.default_rng(2).standard_normal((2, 3, 6)))
    w = np.random.default_rng(3).standard_normal((2, 3, 4))
    ag.backward(ag.tsum(a(teacher_tokens) * Tensor(w)))
    assert all(np.any(p.grad != 0) for p in a.parameters())
    assert teacher_tokens.grad is None
