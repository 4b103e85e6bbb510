import numpy as np
import pytest

from replaysim import nn
from replaysim.errors import ContractError, DimensionError
from replaysim.tensor import (
    Parameter, Tensor, backward, concat, cross_entropy, embedding, is_grad_enabled, log_softmax, matmul, mse,
    no_grad, relu, silu, softmax,
)

H = 1e-5


def _numeric_grad(f, array, index):
    old = array[index]
    array[index] = old + H
    up = f()
    array[index] = old - H
    down = f()
    array[index] = old
    return (up - down) / (2 * H)


def _close(analytic, numeric, rel=1e-4):
    return abs(analytic - numeric) <= rel * max(abs(analytic), abs(numeric)) + 1e-7


def _check_input_grad(build, *arrays):
    """Compare backward() against central differences for every input entry."""
    tensors = [Tensor(a.copy(), requires_grad=True) for a in arrays]
    backward(build(*tensors))
    for t in tensors:
        def f():
            with no_grad():
                return build(*[Tensor(u.data) for u in tensors]).item()
        for index in np.ndindex(t.data.shape):
            assert _close(t.grad[index], _numeric_grad(f, t.data, index)), (build, index)


class Net(nn.Module):
    kind = "net"

    def __init__(self, sizes, activation, seed):
        super().__init__()
        self.mlp = nn.MLP(self, "mlp", sizes, activation, np.random.default_rng(seed))

    def hyperparameters(self):
        return {}

    def forward(self, x):
        return self.mlp(x)


# =========================================================
# OPS
# =========================================================

def test_elementwise_gradients():
    rng = np.random.default_rng(0)
    a, b = rng.normal(size=(3, 4)), rng.normal(size=(3, 4))
    _check_input_grad(lambda x, y: (x * y + x - y).sum(), a, b)
    _check_input_grad(lambda x: (x ** 3).mean(), a)
    _check_input_grad(lambda x: silu(x).sum(), a)
    _check_input_grad(lambda x: (x / 3.0).sum(), a)


def test_broadcast_gradients():
    rng = np.random.default_rng(1)
    _check_input_grad(lambda x, b: (x + b).sum(), rng.normal(size=(5, 3)), rng.normal(size=3))
    _check_input_grad(lambda x, b: (x * b).sum(), rng.normal(size=(5, 3)), rng.normal(size=(5, 1)))


def test_matmul_and_losses():
    rng = np.random.default_rng(2)
    x, w = rng.normal(size=(4, 3)), rng.normal(size=(3, 5))
    _check_input_grad(lambda a, b: matmul(a, b).sum(), x, w)
    target = np.array([0, 4, 2, 1])
    _check_input_grad(lambda a: cross_entropy(a, target), rng.normal(size=(4, 5)))
    _check_input_grad(lambda a: cross_entropy(a, 3, reduction="sum"), rng.normal(size=5))
    _check_input_grad(lambda a, b: mse(a, b), x, rng.normal(size=(4, 3)))
    _check_input_grad(lambda a: (softmax(a, axis=1) * np.arange(5.0)).sum(), rng.normal(size=(2, 5)))
    _check_input_grad(lambda a: (log_softmax(a) * np.arange(5.0)).sum(), rng.normal(size=(2, 5)))


def test_concat_and_embedding():
    rng = np.random.default_rng(3)
    _check_input_grad(lambda a, b: (concat([a, b], axis=1) ** 2).sum(),
                      rng.normal(size=(2, 3)), rng.normal(size=(2, 2)))
    index = np.array([0, 2, 2, 1])
    _check_input_grad(lambda t: (embedding(t, index) ** 2).sum(), rng.normal(size=(3, 4)))


def test_relu_gradient_away_from_kink():
    x = np.array([[-1.5, 0.5, 2.0], [0.3, -0.2, -3.0]])
    _check_input_grad(lambda a: (relu(a) * 2.0).sum(), x)


# =========================================================
# RANDOM MLPs
# =========================================================

def test_random_mlp_gradients_match_finite_differences():
    rng = np.random.default_rng(42)
    for instance in range(50):
        depth = int(rng.integers(1, 4))
        sizes = [int(rng.integers(2, 9))] + [int(rng.integers(2, 65)) for _ in range(depth - 1)] + [int(rng.integers(2, 6))]
        net = Net(sizes, "silu", seed=instance)
        x = Tensor(rng.normal(size=(3, sizes[0])), requires_grad=True)
        y = rng.integers(0, sizes[-1], size=3)

        backward(cross_entropy(net(x), y, reduction="sum"))

        def loss():
            with no_grad():
                return cross_entropy(net(Tensor(x.data)), y, reduction="sum").item()

        for p in net.parameters() + [x]:
            flat = p.data.reshape(-1)
            picks = rng.choice(flat.size, size=min(flat.size, 6), replace=False)
            for k in picks:
                index = np.unravel_index(k, p.data.shape)
                assert _close(p.grad[index], _numeric_grad(loss, p.data, index)), (instance, index)


def test_gradients_accumulate_over_reused_nodes():
    x = Tensor(np.array([2.0]), requires_grad=True)
    backward((x * x + x).sum())
    assert x.grad[0] == pytest.approx(5.0)


# =========================================================
# CONTRACTS
# =========================================================

def test_backward_needs_scalar():
    x = Tensor(np.ones((2, 2)), requires_grad=True)
    with pytest.raises(ContractError):
        backward(x * 2.0)


def test_backward_needs_graph():
    with pytest.raises(ContractError):
        backward(Tensor(1.0))


def test_shape_mismatch_names_op():
    with pytest.raises(DimensionError, match="matmul"):
        matmul(Tensor(np.ones((2, 3))), Tensor(np.ones((2, 3))))
    with pytest.raises(DimensionError, match="add"):
        Tensor(np.ones(3)) + Tensor(np.ones(4))


def test_no_grad_records_nothing():
    p = Parameter(np.ones(3), "p")
    with no_grad():
        assert not is_grad_enabled()
        out = (p * 2.0).sum()
    assert not out.requires_grad
    assert is_grad_enabled()


def test_detach_copies_into_a_leaf():
    p = Parameter(np.ones(3), "p")
    d = (p * 2.0).detach()
    assert not d.requires_grad
    d.data[0] = 5.0
    assert p.data[0] == 1.0


def test_target_out_of_range():
    with pytest.raises(ContractError):
        cross_entropy(Tensor(np.zeros((1, 3))), [3])


def test_item_requires_single_element():
    assert Tensor([4.0]).item() == 4.0
    with pytest.raises(ContractError):
        Tensor([1.0, 2.0]).item()


def test_worked_values():
    np.testing.assert_allclose(softmax(Tensor([0.0, 0.0, 0.0])).data, [1 / 3] * 3)
    assert cross_entropy(Tensor([0.0, 0.0]), 0).item() == pytest.approx(np.log(2.0))
    logits = np.random.default_rng(0).normal(size=(4, 3))
    assert cross_entropy(Tensor(logits), 2).item() == cross_entropy(Tensor(logits), [2, 2, 2, 2]).item()
    v = np.array([[1.0], [2.0], [3.0]])
    np.testing.assert_array_equal(matmul(Tensor(np.eye(3)), Tensor(v)).data, v)

    x = Tensor(np.array([1.0, 2.0]), requires_grad=True)
    backward((x ** 2).sum())
    np.testing.assert_allclose(x.grad, [2.0, 4.0])


def test_softmax_rows_sum_to_one():
    probs = softmax(Tensor(np.random.default_rng(0).normal(scale=20.0, size=(50, 7))), axis=1).data
    assert np.all(probs >= 0)
    np.testing.assert_allclose(probs.sum(axis=1), 1.0, atol=1e-12)
