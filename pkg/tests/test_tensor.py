import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from sparse4d import tensor as T
from sparse4d.errors import ContractError, DimensionError, NumericalError
from sparse4d.tensor import Linear, Parameter, Tensor


def leaf(x):
    return Tensor(np.asarray(x, dtype=np.float64), requires_grad=True)


# ---------------------------------------------------------------------------
# linear

def test_linear_identity_weight():
    out = T.linear(Tensor([[1.0, 2.0, 3.0]]), Tensor(np.eye(3)), Tensor(np.zeros(3)))
    np.testing.assert_array_equal(out.data, [[1, 2, 3]])


def test_linear_zero_input_passes_bias():
    out = T.linear(Tensor(np.zeros((1, 2))), Tensor(np.ones((2, 2))), Tensor([5.0, -1.0]))
    np.testing.assert_array_equal(out.data, [[5, -1]])


def test_linear_hand_example():
    out = T.linear(Tensor([[1.0, 2.0]]), Tensor([[1.0, 0.0], [0.0, 2.0]]), Tensor([1.0, 1.0]))
    np.testing.assert_array_equal(out.data, [[2, 5]])


def test_linear_shape_mismatch_names_shapes():
    with pytest.raises(DimensionError, match=r"\(1, 3\).*\(2, 2\)"):
        T.linear(Tensor(np.zeros((1, 3))), Tensor(np.zeros((2, 2))), Tensor(np.zeros(2)))


def test_linear_gradcheck_4x3(rng):
    x, w, b = leaf(rng.normal(size=(4, 3))), leaf(rng.normal(size=(3, 2))), leaf(rng.normal(size=2))
    err = T.grad_check(lambda x, w, b: T.sum(T.linear(x, w, b) * T.linear(x, w, b)), [x, w, b])
    assert err < 1e-6


# ---------------------------------------------------------------------------
# softmax

def test_softmax_uniform_logits():
    np.testing.assert_allclose(T.softmax(Tensor([0.0, 0.0, 0.0]), 0).data, [1 / 3] * 3, rtol=0, atol=1e-15)


def test_softmax_extended_precision_oracle():
    # frozen from a 30-digit evaluation of exp(k)/sum exp(k)
    expected = [0.0900305731703805, 0.244728471054798, 0.665240955774822]
    np.testing.assert_allclose(T.softmax(Tensor([1.0, 2.0, 3.0]), 0).data, expected, rtol=1e-6)


@given(arrays(np.float64, (3, 5), elements=st.floats(-30, 30)), st.floats(-50, 50), st.sampled_from([0, 1]))
def test_softmax_normalized_positive_and_shift_invariant(x, c, axis):
    p = T.softmax(Tensor(x), axis).data
    assert (p > 0).all()
    np.testing.assert_allclose(p.sum(axis=axis), 1.0, atol=1e-12)
    np.testing.assert_allclose(T.softmax(Tensor(x + c), axis).data, p, atol=1e-12)


# ---------------------------------------------------------------------------
# backward

def test_backward_square():
    x = leaf(3.0)
    T.backward(x * x)
    assert x.grad == pytest.approx(6.0)


def test_backward_sigmoid_at_zero():
    x = leaf(0.0)
    T.backward(T.sigmoid(x))
    assert x.grad == pytest.approx(0.25)


def test_backward_rejects_non_scalar_seed():
    x = leaf([1.0, 2.0])
    with pytest.raises(ContractError):
        T.backward(x * x)


def test_three_layer_mlp_matches_finite_differences(rng):
    layers = [Linear(4, 6, rng, np.float64), Linear(6, 5, rng, np.float64), Linear(5, 1, rng, np.float64)]
    params = [p for layer in layers for p in layer.parameters()]
    x = leaf(rng.normal(size=(3, 4)))

    def f(*_):
        h = T.relu(layers[0](x))
        h = T.sigmoid(layers[1](h))
        return T.sum(layers[2](h))

    for p in params:
        p.grad = None
    assert T.grad_check(f, [x] + params) < 1e-5


def test_independent_input_gets_exact_zero_gradient():
    x, y = leaf([1.0, 2.0]), leaf([3.0, 4.0])
    T.backward(T.sum(x * x) + T.sum(T.scale(T.detach(y), 0.0)))
    assert y.grad is None or not y.grad.any()
    p = Parameter(np.ones(2))
    T.backward(T.sum(x * x))
    np.testing.assert_array_equal(p.grad, 0.0)


def test_gradients_accumulate_across_calls():
    x = leaf(2.0)
    T.backward(x * x)
    T.backward(x * x)
    assert x.grad == pytest.approx(8.0)


def test_shared_subexpression_visited_once():
    x = leaf(1.5)
    y = T.exp(x)
    T.backward(y * y)  # d/dx e^{2x}
    assert x.grad == pytest.approx(2 * math.exp(3.0))


def test_replay_is_bit_identical(rng):
    a = rng.normal(size=(5, 7))
    w = rng.normal(size=(7, 3))

    def run():
        x = leaf(a)
        out = T.sum(T.softmax(T.matmul(x, Tensor(w)), 1) * T.sigmoid(T.matmul(x, Tensor(w))))
        T.backward(out)
        return out.data.tobytes(), x.grad.tobytes()

    assert run() == run()


def test_no_grad_builds_no_graph():
    x = leaf(2.0)
    with T.no_grad():
        y = x * x
    assert not y.requires_grad and y.inputs == ()


# ---------------------------------------------------------------------------
# grad_check and primitives

def test_grad_check_constant_function_is_zero():
    x = leaf([1.0, 2.0, 3.0])
    assert T.grad_check(lambda x: Tensor(7.0), [x]) == 0.0


def test_grad_check_rejects_bad_step():
    with pytest.raises(ContractError):
        T.grad_check(lambda x: T.sum(x), [leaf([1.0])], step=0.0)


def test_grad_check_names_nonfinite_coordinate():
    x = leaf([0.0, 1.0])

    def f(x):
        # finite only at the unperturbed point
        return Tensor(0.0 if x.data[0] == 0.0 else math.inf)

    with pytest.raises(NumericalError, match="coordinate 0"):
        T.grad_check(f, [x], step=1e-5)


UNARY = {
    "sigmoid": (T.sigmoid, lambda r, s: r.normal(size=s)),
    "relu": (T.relu, lambda r, s: r.normal(size=s) + np.sign(r.normal(size=s)) * 0.1),
    "exp": (T.exp, lambda r, s: r.normal(size=s)),
    "log": (T.log, lambda r, s: r.uniform(0.5, 2.0, size=s)),
    "sqrt": (T.sqrt, lambda r, s: r.uniform(0.5, 2.0, size=s)),
    "abs": (T.absolute, lambda r, s: r.uniform(0.2, 1.0, size=s) * np.sign(r.normal(size=s))),
}


@pytest.mark.parametrize("name", sorted(UNARY))
def test_unary_primitive_gradients_on_ten_instances(name):
    op, sample = UNARY[name]
    r = np.random.default_rng(7)
    for _ in range(10):
        shape = tuple(r.integers(1, 4, size=2))
        x = leaf(sample(r, shape))
        w = Tensor(r.normal(size=shape))
        assert T.grad_check(lambda x: T.sum(op(x) * w), [x]) < 1e-5


@pytest.mark.parametrize("op", [T.add, T.sub, T.mul, T.div])
def test_binary_primitive_gradients(op):
    r = np.random.default_rng(8)
    for _ in range(10):
        shape = tuple(r.integers(1, 4, size=2))
        a = leaf(r.normal(size=shape))
        b = leaf(r.uniform(0.5, 2.0, size=shape))
        w = Tensor(r.normal(size=shape))
        assert T.grad_check(lambda a, b: T.sum(op(a, b) * w), [a, b]) < 1e-5


def test_structural_primitive_gradients(rng):
    a, b = leaf(rng.normal(size=(2, 3, 4))), leaf(rng.normal(size=(2, 3, 4)))
    w = Tensor(rng.normal(size=(4, 3, 4)))

    def f(a, b):
        c = T.concat([a, b], axis=0)
        s = T.stack([T.transpose(a, (1, 0, 2)), T.transpose(b, (1, 0, 2))], axis=0)
        r = T.reshape(s, (4, 3, 4))
        return T.sum(c * w) + T.sum(r * w) + T.sum(T.broadcast_to(T.sum(a, axis=1, keepdims=True), (2, 3, 4)))

    assert T.grad_check(f, [a, b]) < 1e-5


def test_mean_and_getitem_gradients(rng):
    x = leaf(rng.normal(size=(4, 5)))
    idx = np.array([0, 2, 2, 3])
    assert T.grad_check(lambda x: T.mean(x[idx] * x[idx]) + T.sum(x[1:3, ::2]), [x]) < 1e-5


def test_elementwise_requires_matching_shapes():
    with pytest.raises(DimensionError):
        T.add(Tensor(np.zeros(3)), Tensor(np.zeros((3, 1))))


def test_constants_broadcast_but_tensors_do_not():
    out = T.add(Tensor(np.zeros((2, 3))), 1.5)
    np.testing.assert_array_equal(out.data, 1.5)


def test_nan_is_an_error_state():
    with pytest.raises(NumericalError):
        T.log(Tensor([-1.0]))


def test_flop_counter_tags():
    with T.count_flops() as c:
        with T.flop_tag("x"):
            T.add(Tensor(np.ones(5)), Tensor(np.ones(5)))
        T.matmul(Tensor(np.ones((2, 3))), Tensor(np.ones((3, 4))))
    assert c["x"] == 5
    assert c["other"] > 0


def test_parameter_gradient_shape_matches():
    p = Parameter(np.ones((3, 2)))
    assert p.grad.shape == p.shape
    T.backward(T.sum(p * p))
    np.testing.assert_array_equal(p.grad, 2.0)
    p.zero_grad()
    np.testing.assert_array_equal(p.grad, 0.0)
