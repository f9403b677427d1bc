import math

import numpy as np
import pytest
import torch

from stppflow.odeint import (IntervalBatch, MaxStepsExceeded, NonFinite,
                             OdeSolution, OutOfRange, SolverConfig, dense_eval,
                             solve, solve_batch_unit)

TIGHT = SolverConfig(rtol=1e-8, atol=1e-8)


def test_exponential_endpoint():
    sol = solve(lambda t, x: x, torch.tensor([1.0]), 0.0, 1.0, TIGHT)
    assert abs(float(sol.endpoint_state) - math.e) < 1e-6
    assert sol.steps_accepted >= 1


def test_zero_field_identity():
    v = torch.tensor([3.0, -2.0, 0.5])
    sol = solve(lambda t, x: torch.zeros_like(x), v, -1.0, 4.0)
    assert torch.equal(sol.endpoint_state, v)


def test_rotation_full_circle():
    def f(t, x):
        return torch.stack([-x[1], x[0]])

    sol = solve(f, torch.tensor([1.0, 0.0]), 0.0, 2 * math.pi, TIGHT)
    assert float((sol.endpoint_state - torch.tensor([1.0, 0.0])).abs().max()) < 1e-5


def test_zero_length_interval_skips_field():
    calls = []

    def f(t, x):
        calls.append(t)
        return x

    sol = solve(f, torch.tensor([2.0]), 1.5, 1.5)
    assert torch.equal(sol.endpoint_state, torch.tensor([2.0]))
    assert sol.steps_accepted == 0 and not calls


def test_reverse_time():
    sol = solve(lambda t, x: x, torch.tensor([math.e]), 1.0, 0.0, TIGHT)
    assert abs(float(sol.endpoint_state) - 1.0) < 1e-6


def test_nonfinite_detected():
    with pytest.raises(NonFinite):
        solve(lambda t, x: x / torch.zeros_like(x), torch.tensor([1.0]), 0.0, 1.0)


def test_max_steps_exceeded():
    cfg = SolverConfig(rtol=1e-12, atol=1e-14, max_steps=3)
    with pytest.raises(MaxStepsExceeded):
        solve(lambda t, x: torch.sin(50 * t * x) * 100, torch.tensor([1.0]),
              0.0, 10.0, cfg)


def test_determinism_bitwise():
    def f(t, x):
        return torch.sin(x) + t

    a = solve(f, torch.tensor([0.3]), 0.0, 2.0)
    b = solve(f, torch.tensor([0.3]), 0.0, 2.0)
    assert torch.equal(a.endpoint_state, b.endpoint_state)
    assert a.steps_accepted == b.steps_accepted


def test_dense_eval_at_knots_exact():
    sol = solve(lambda t, x: x, torch.tensor([1.0]), 0.0, 1.0, TIGHT, dense=True)
    for knot in sol.dense_knots:
        assert torch.equal(dense_eval(sol, knot.t1), knot.y1)
        assert torch.equal(dense_eval(sol, knot.t0), knot.y0)


def test_dense_eval_linear_midpoint():
    sol = solve(lambda t, x: torch.ones_like(x), torch.tensor([0.0]), 0.0, 2.0,
                dense=True)
    assert abs(float(dense_eval(sol, 1.0)) - 1.0) < 1e-9


def test_dense_eval_exponential_midpoint():
    sol = solve(lambda t, x: x, torch.tensor([1.0]), 0.0, 1.0, dense=True)
    assert abs(float(dense_eval(sol, 0.5)) - math.exp(0.5)) < 1e-5


def test_dense_eval_out_of_range():
    sol = solve(lambda t, x: x, torch.tensor([1.0]), 0.0, 1.0, dense=True)
    with pytest.raises(OutOfRange):
        dense_eval(sol, 1.5)
    nod = solve(lambda t, x: x, torch.tensor([1.0]), 0.0, 1.0)
    with pytest.raises(OutOfRange):
        dense_eval(nod, 0.5)


def test_fixed_step_order_five():
    errs = []
    hs = [0.2, 0.1, 0.05, 0.025]
    for h in hs:
        cfg = SolverConfig(fixed_step=h)
        sol = solve(lambda t, x: x, torch.tensor([1.0]), 0.0, 1.0, cfg)
        errs.append(abs(float(sol.endpoint_state) - math.e))
    slope = np.polyfit(np.log(hs), np.log(errs), 1)[0]
    assert abs(slope - 5.0) < 0.3


def test_reverse_trip_recovers_initial_state():
    def f(t, x):
        return torch.sin(x) + 0.5 * t

    cfg = SolverConfig(rtol=1e-6, atol=1e-6)
    x0 = torch.tensor([0.7, -0.2])
    fwd = solve(f, x0, 0.0, 1.0, cfg)
    back = solve(f, fwd.endpoint_state, 1.0, 0.0, cfg)
    assert float((back.endpoint_state - x0).abs().max()) < 10 * (cfg.rtol + cfg.atol)


def test_batch_unit_linear_growth():
    batch = IntervalBatch(torch.zeros(2, 1), torch.zeros(2), torch.tensor([2.0, 5.0]))
    end, _ = solve_batch_unit(batch, lambda t, X: torch.ones_like(X))
    assert torch.allclose(end.squeeze(-1), torch.tensor([2.0, 5.0]), atol=1e-9)


def test_batch_unit_zero_length():
    x0 = torch.tensor([[1.5], [2.5]])
    batch = IntervalBatch(x0, torch.tensor([1.0, 1.0]), torch.tensor([1.0, 1.0]))
    end, _ = solve_batch_unit(batch, lambda t, X: X)
    assert torch.equal(end, x0)


def test_batch_unit_matches_sequential_decay():
    gen = torch.Generator().manual_seed(0)
    x0 = torch.randn(4, 3, generator=gen)
    t_end = torch.rand(4, generator=gen) * 3

    def f(t, X):
        return -X

    batch = IntervalBatch(x0, torch.zeros(4), t_end)
    end, _ = solve_batch_unit(batch, f, SolverConfig(rtol=1e-7, atol=1e-7))
    for m in range(4):
        solo = solve(f, x0[m], 0.0, float(t_end[m]), SolverConfig(rtol=1e-7, atol=1e-7))
        assert float((end[m] - solo.endpoint_state).abs().max()) < 1e-5


def test_batch_unit_single_system_equivalence_random_linear():
    gen = torch.Generator().manual_seed(1)
    cfg = SolverConfig(rtol=1e-7, atol=1e-7)
    for _ in range(100):
        a = float(torch.randn((), generator=gen))
        x0 = torch.randn(1, 2, generator=gen)
        t1 = float(torch.rand((), generator=gen) * 2 + 0.1)

        def f(t, X):
            return a * X

        batch = IntervalBatch(x0, torch.zeros(1), torch.tensor([t1]))
        end, _ = solve_batch_unit(batch, f, cfg)
        solo = solve(f, x0[0], 0.0, t1, cfg)
        assert float((end[0] - solo.endpoint_state).abs().max()) < 1e-5


def test_batch_unit_reverse_horizons():
    # horizons running backward in time (data -> base direction)
    x0 = torch.tensor([[1.0], [2.0]])
    batch = IntervalBatch(x0, torch.tensor([2.0, 3.0]), torch.zeros(2))
    end, _ = solve_batch_unit(batch, lambda t, X: torch.ones_like(X),
                              SolverConfig(rtol=1e-9, atol=1e-9))
    assert torch.allclose(end.squeeze(-1), torch.tensor([-1.0, -1.0]), atol=1e-7)


def test_config_validation():
    with pytest.raises(ValueError):
        SolverConfig(method="euler")
    with pytest.raises(ValueError):
        SolverConfig(rtol=0.0)
    with pytest.raises(ValueError):
        SolverConfig(max_steps=0)


def test_rk4_fixed_step_works():
    cfg = SolverConfig(method="rk4", initial_step=0.01)
    sol = solve(lambda t, x: x, torch.tensor([1.0]), 0.0, 1.0, cfg, dense=True)
    assert abs(float(sol.endpoint_state) - math.e) < 1e-7
    assert abs(float(dense_eval(sol, 0.5)) - math.exp(0.5)) < 1e-5


def test_gradient_through_solve():
    theta = torch.tensor(0.7, requires_grad=True)
    sol = solve(lambda t, x: theta * x, torch.tensor([1.0]), 0.0, 1.0, TIGHT)
    sol.endpoint_state.sum().backward()
    # d/dtheta e^theta = e^theta
    assert abs(float(theta.grad) - math.exp(0.7)) < 1e-5
