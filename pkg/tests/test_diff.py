import math

import pytest
import torch

from stppflow.diff import (GradResult, NonFiniteError, ParameterStore,
                           assert_finite, detach, grad)
from stppflow.odeint import SolverConfig, solve


def test_square_gradient():
    store = ParameterStore()
    x = store.add("x", 3.0)
    g = grad(x * x, store)
    assert float(g["x"]) == pytest.approx(6.0)


def test_softplus_gradient_at_zero():
    store = ParameterStore()
    x = store.add("x", 0.0)
    g = grad(torch.nn.functional.softplus(x), store)
    assert float(g["x"]) == pytest.approx(0.5)


def test_detach_product_rule():
    store = ParameterStore()
    x = store.add("x", 3.0)
    g = grad(x * detach(x), store)
    assert float(g["x"]) == pytest.approx(3.0)


def test_detach_leaf_disconnected():
    store = ParameterStore()
    x = store.add("x", 2.0)
    y = store.add("y", 5.0)
    g = grad(x * 2 + detach(y) * 3, store)
    assert float(g["x"]) == pytest.approx(2.0)
    assert float(g["y"]) == 0.0
    assert "y" in g.disconnected


def test_disconnected_reported_with_zero():
    store = ParameterStore()
    x = store.add("x", 1.0)
    unused = store.add("unused", torch.ones(3))
    g = grad(x ** 3, store)
    assert torch.equal(g["unused"], torch.zeros(3))
    assert g.disconnected == {"unused"}


def test_nonfinite_gradient_raises():
    store = ParameterStore()
    x = store.add("x", 0.0)
    with pytest.raises(NonFiniteError):
        grad(torch.log(x), store)


def test_assert_finite():
    assert_finite(torch.tensor([1.0, 2.0]))
    with pytest.raises(NonFiniteError):
        assert_finite(torch.tensor([1.0, float("nan")]))


def test_solve_gradient_vs_finite_differences():
    cfg = SolverConfig(rtol=1e-8, atol=1e-8)
    theta = torch.tensor(0.5, requires_grad=True)

    def endpoint(th):
        return solve(lambda t, x: th * x, torch.tensor([1.0]), 0.0, 1.0,
                     cfg).endpoint_state.sum()

    out = endpoint(theta)
    g = torch.autograd.grad(out, theta)[0]
    eps = 1e-5
    fd = (float(endpoint(theta.detach() + eps)) -
          float(endpoint(theta.detach() - eps))) / (2 * eps)
    assert abs(float(g) - fd) / abs(fd) < 1e-4


def test_fixed_step_solve_gradient_vs_finite_differences():
    # freeze the step sequence so the finite-difference comparison is exact
    cfg = SolverConfig(fixed_step=0.1)
    theta = torch.tensor(-0.3, requires_grad=True)

    def endpoint(th):
        return solve(lambda t, x: th * torch.sin(x), torch.tensor([1.2]),
                     0.0, 1.0, cfg).endpoint_state.sum()

    g = torch.autograd.grad(endpoint(theta), theta)[0]
    eps = 1e-6
    fd = (float(endpoint(theta.detach() + eps)) -
          float(endpoint(theta.detach() - eps))) / (2 * eps)
    assert abs(float(g) - fd) / max(abs(fd), 1e-12) < 1e-4


@pytest.mark.parametrize("op", [
    lambda x: (x @ x.T).sum(),
    lambda x: torch.nn.functional.softplus(x).sum(),
    lambda x: torch.tanh(x).sum(),
    lambda x: torch.sigmoid(x).sum(),
    lambda x: torch.exp(x).sum(),
    lambda x: torch.log(x.abs() + 1.0).sum(),
    lambda x: torch.softmax(x.reshape(-1), 0).var(),
    lambda x: (x * x + x).sum(),
])
def test_primitive_ops_finite_differences(op):
    gen = torch.Generator().manual_seed(42)
    for trial in range(6):
        x = torch.randn(3, 3, generator=gen, requires_grad=True)
        g = torch.autograd.grad(op(x), x)[0]
        eps = 1e-6
        i, j = trial % 3, (trial * 2) % 3
        xp = x.detach().clone()
        xp[i, j] += eps
        xm = x.detach().clone()
        xm[i, j] -= eps
        fd = (float(op(xp)) - float(op(xm))) / (2 * eps)
        assert abs(float(g[i, j]) - fd) / max(abs(fd), 1e-6) < 1e-4


def test_parameter_store_roundtrip():
    store = ParameterStore()
    store.add("a", torch.tensor([[1.0, 2.0], [3.0, 4.0]]))
    store.add("flag", torch.zeros(1), trainable=False)
    state = store.state_dict()

    other = ParameterStore()
    other.add("a", torch.zeros(2, 2))
    other.add("flag", torch.ones(1), trainable=False)
    other.load_state_dict(state)
    assert torch.equal(other["a"], store["a"])
    assert torch.equal(other["flag"], store["flag"])


def test_parameter_store_mismatch_rejected():
    store = ParameterStore()
    store.add("a", 1.0)
    other = ParameterStore()
    other.add("b", 1.0)
    with pytest.raises(KeyError):
        other.load_state_dict(store.state_dict())


def test_parameter_store_duplicate_and_trainable_filter():
    store = ParameterStore()
    store.add("w", torch.ones(2))
    store.add("buf", torch.zeros(2), trainable=False)
    with pytest.raises(KeyError):
        store.add("w", 0.0)
    assert len(store.tensors(trainable_only=True)) == 1
    assert len(store.tensors(trainable_only=False)) == 2


def test_grad_requires_scalar():
    store = ParameterStore()
    x = store.add("x", torch.ones(2))
    with pytest.raises(ValueError):
        grad(x * 2, store)
