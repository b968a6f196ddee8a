import math

import numpy as np
import pytest

from trgl.errors import ContractError, DimensionError
from trgl.tensor import (
    OPS,
    SgdState,
    Tensor,
    add,
    backward,
    forward_op,
    matmul,
    mean,
    orthogonal_init,
    relu,
    scale,
    sgd_step,
    softmax_cross_entropy,
    step_decay,
    sum_sq,
)


def leaf(values):
    return Tensor(values, requires_grad=True)


def test_matmul_shape():
    out = matmul(Tensor(np.ones((2, 3))), Tensor(np.ones((3, 4))))
    assert out.shape == (2, 4)
    assert np.all(out.values == 3.0)


def test_matmul_mismatch_names_op_and_shapes():
    with pytest.raises(DimensionError) as exc:
        matmul(Tensor(np.ones((2, 3))), Tensor(np.ones((4, 4))))
    msg = str(exc.value)
    assert "matmul" in msg and "(2, 3)" in msg and "(4, 4)" in msg


def test_uniform_softmax_cross_entropy():
    for label in (0, 3, 9):
        loss = softmax_cross_entropy(Tensor(np.zeros((1, 10))), np.array([label]))
        assert loss.item() == pytest.approx(math.log(10), abs=1e-12)


def test_relu_values():
    assert relu(Tensor([-1.0, 0.0, 2.0])).values.tolist() == [0.0, 0.0, 2.0]


def test_forward_op_dispatch_matches_direct_calls():
    x = Tensor([[1.0, -2.0]])
    assert np.array_equal(forward_op("relu", [x]).values, relu(x).values)
    assert forward_op("scale", [x], c=3.0).values.tolist() == [[3.0, -6.0]]
    assert set(OPS) >= {"matmul", "add", "relu", "softmax_cross_entropy"}
    with pytest.raises(ValueError):
        forward_op("conv", [x])


def test_sum_sq_gradient():
    x = leaf([1.0, 2.0])
    backward(sum_sq(x))
    assert x.grad.tolist() == [2.0, 4.0]


def test_relu_gradient_zero_for_negative_and_at_zero():
    x = leaf([-1.0, 0.0, 3.0])
    backward(sum_sq(relu(x)))
    assert x.grad.tolist() == [0.0, 0.0, 6.0]


def test_backward_rejects_non_scalar():
    with pytest.raises(ContractError):
        backward(relu(leaf([1.0, 2.0])))


def test_fan_out_sums_contributions():
    x = leaf([3.0])
    backward(add(sum_sq(x), scale(sum_sq(x), 2.0)))
    assert x.grad.tolist() == [18.0]


def test_backward_resets_unless_accumulating():
    x = leaf([1.0])
    backward(sum_sq(x))
    backward(sum_sq(x))
    assert x.grad.tolist() == [2.0]
    backward(sum_sq(x), accumulate=True)
    assert x.grad.tolist() == [4.0]


def test_gradients_deterministic():
    rng = np.random.default_rng(0)
    a, w = rng.standard_normal((5, 3)), rng.standard_normal((3, 4))
    labels = np.array([0, 1, 2, 3, 0])
    grads = []
    for _ in range(2):
        wt = leaf(w)
        backward(mean(softmax_cross_entropy(matmul(Tensor(a), wt), labels)))
        grads.append(wt.grad.copy())
    assert np.array_equal(grads[0], grads[1])


def test_constant_graph_leaves_no_grad():
    x = Tensor([1.0, 2.0])
    out = sum_sq(x)
    assert out.op is None and x.grad is None
    backward(out)


def test_sgd_plain_step():
    p = leaf([1.0])
    p.grad = np.array([2.0])
    sgd_step([p], SgdState(lr=0.1, momentum=0.0), 1)
    assert p.values[0] == pytest.approx(0.8, abs=1e-15)


def test_sgd_zero_grad_is_fixed_point():
    p = leaf([1.5])
    sgd_step([p], SgdState(lr=0.1, momentum=0.9), 1)
    assert p.values.tolist() == [1.5]


def test_sgd_momentum_two_steps():
    p = leaf([0.0])
    state = SgdState(lr=1.0, momentum=0.9)
    for step in (1, 2):
        p.grad = np.array([1.0])
        sgd_step([p], state, step)
    assert p.values[0] == pytest.approx(-2.9, abs=1e-12)


def test_sgd_weight_decay_enters_velocity():
    p = leaf([2.0])
    p.grad = np.array([0.0])
    sgd_step([p], SgdState(lr=0.5, momentum=0.0, weight_decay=0.1), 1)
    assert p.values[0] == pytest.approx(2.0 - 0.5 * 0.2)


def test_sgd_missing_grad_is_contract_error():
    p = Tensor([1.0])
    with pytest.raises(ContractError):
        sgd_step([p], SgdState(lr=0.1), 1)


@pytest.mark.parametrize("kwargs", [{"momentum": 1.0}, {"momentum": -0.1}, {"weight_decay": -1.0}])
def test_sgd_state_validation(kwargs):
    with pytest.raises(ValueError):
        SgdState(**kwargs)


def test_step_decay_schedule():
    lr = step_decay(1.0, (10, 20), 0.5)
    assert [lr(1), lr(10), lr(19), lr(20)] == [1.0, 0.5, 0.5, 0.25]


def test_orthogonal_square():
    q = orthogonal_init(4, 4, 1.0, np.random.default_rng(0)).values
    assert np.max(np.abs(q.T @ q - np.eye(4))) < 1e-10


@pytest.mark.parametrize("shape", [(6, 3), (3, 6), (5, 5)])
def test_orthogonal_gain_sets_norms(shape):
    q = orthogonal_init(*shape, 0.05, np.random.default_rng(1)).values
    axis = 0 if shape[0] >= shape[1] else 1
    assert np.max(np.abs(np.linalg.norm(q, axis=axis) - 0.05)) < 1e-10


def test_orthogonal_seeded_bitwise():
    a = orthogonal_init(8, 5, 0.3, np.random.default_rng(7)).values
    b = orthogonal_init(8, 5, 0.3, np.random.default_rng(7)).values
    assert a.tobytes() == b.tobytes()


def test_orthogonal_rejects_bad_arguments():
    with pytest.raises(ValueError):
        orthogonal_init(0, 3, 1.0, np.random.default_rng(0))
    with pytest.raises(ValueError):
        orthogonal_init(3, 3, 0.0, np.random.default_rng(0))
