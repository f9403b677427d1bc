import math

import pytest
import torch
from scipy.integrate import quad

from stppflow.diff import ParameterStore
from stppflow.latent import EventSequence, HiddenPath, LatentDynamics
from stppflow.odeint import SolverConfig


def make_dynamics(seed=0, hidden_dim=8):
    store = ParameterStore()
    gen = torch.Generator().manual_seed(seed)
    return LatentDynamics(store, gen, mark_dim=2, hidden_dim=hidden_dim,
                          f_widths=(16, 16)), store


def seq3(T=5.0, seed=0):
    gen = torch.Generator().manual_seed(seed)
    return EventSequence(torch.tensor([1.0, 2.5, 4.0]),
                         torch.randn(3, 2, generator=gen), T)


def test_sequence_validation():
    with pytest.raises(ValueError):
        EventSequence(torch.tensor([2.0, 1.0]), torch.zeros(2, 2), 5.0)
    with pytest.raises(ValueError):
        EventSequence(torch.tensor([1.0, 1.0]), torch.zeros(2, 2), 5.0)
    with pytest.raises(ValueError):
        EventSequence(torch.tensor([1.0, 6.0]), torch.zeros(2, 2), 5.0)
    with pytest.raises(ValueError):
        EventSequence(torch.tensor([1.0]), torch.zeros(2, 2), 5.0)
    empty = EventSequence(torch.zeros(0), torch.zeros(0, 2), 1.0)
    assert len(empty) == 0


def test_zero_drift_no_events_constant_hidden():
    dyn, store = make_dynamics()
    seq = EventSequence(torch.zeros(0), torch.zeros(0, 2), 3.0)
    path = dyn.evolve(seq)
    h0 = store["latent.h0"]
    for t in (0.0, 1.2, 3.0):
        assert float((path.h_at(t) - h0).abs().max()) < 1e-12


def test_zero_drift_one_event_single_jump():
    dyn, store = make_dynamics()
    gen = torch.Generator().manual_seed(1)
    seq = EventSequence(torch.tensor([1.0]), torch.randn(1, 2, generator=gen), 2.0)
    path = dyn.evolve(seq)
    h0 = store["latent.h0"]
    assert float((path.h_at(0.5) - h0).abs().max()) < 1e-12
    assert float((path.pre_jump[0] - h0).abs().max()) < 1e-12
    # post-jump state differs and is constant afterwards
    assert float((path.post_jump[0] - h0).abs().max()) > 1e-6
    assert float((path.h_at(1.7) - path.post_jump[0]).abs().max()) < 1e-12


def test_caglad_query_contract():
    dyn, _ = make_dynamics(seed=2)
    seq = seq3()
    path = dyn.evolve(seq)
    t1 = 1.0
    assert torch.allclose(path.h_at(t1), path.pre_jump[0])
    just_after = path.h_at(t1 + 1e-9)
    assert float((just_after - path.post_jump[0]).abs().max()) < 1e-6


def test_h_on_interval_post_jump_at_left_boundary():
    dyn, _ = make_dynamics(seed=2)
    path = dyn.evolve(seq3())
    # interval 1 starts at the first event; its left boundary is post-jump
    assert torch.allclose(path.h_on_interval(1, 1.0), path.post_jump[0])
    assert torch.allclose(path.h_at(1.0), path.pre_jump[0])


def test_constant_intensity_homogeneous_poisson():
    dyn, store = make_dynamics()
    with torch.no_grad():
        for name in store.names():
            store[name].zero_()
    seq = seq3(T=5.0)
    ll, _ = dyn.temporal_loglik(seq)
    lam = math.log(2.0)  # softplus(0)
    expect = 3 * math.log(lam) - lam * 5.0
    assert abs(float(ll) - expect) < 1e-8


def test_empty_sequence_loglik_is_negative_compensator():
    dyn, _ = make_dynamics(seed=3)
    seq = EventSequence(torch.zeros(0), torch.zeros(0, 2), 4.0)
    ll, path = dyn.temporal_loglik(seq)
    assert abs(float(ll) + float(path.total_compensator)) < 1e-12


def test_compensator_matches_quadrature():
    dyn, _ = make_dynamics(seed=4)
    seq = seq3(T=5.0, seed=5)
    cfg = SolverConfig(rtol=1e-8, atol=1e-8)
    path = dyn.evolve(seq, cfg)

    def lam(t):
        idx = sum(1 for et in path.event_times if et < t)
        idx = min(idx, len(path.intervals) - 1)
        h = path.h_on_interval(idx, t)
        return float(dyn.intensity(h).detach())

    total = 0.0
    bounds = [0.0] + path.event_times + [seq.T]
    for lo, hi in zip(bounds[:-1], bounds[1:]):
        val, _ = quad(lam, lo, hi, limit=200)
        total += val
    comp = float(path.total_compensator.detach())
    assert abs(comp - total) / abs(total) < 1e-4


def test_intensity_positive_everywhere():
    dyn, _ = make_dynamics(seed=6)
    path = dyn.evolve(seq3(seed=7))
    gen = torch.Generator().manual_seed(8)
    ts = torch.rand(1000, generator=gen) * 5.0
    for t in ts.tolist():
        assert float(dyn.intensity(path.h_at(t))) > 0.0


def test_jump_locality():
    dyn, _ = make_dynamics(seed=9)
    gen = torch.Generator().manual_seed(10)
    marks = torch.randn(3, 2, generator=gen)
    seq_a = EventSequence(torch.tensor([1.0, 2.5, 4.0]), marks, 5.0)
    marks_b = marks.clone()
    marks_b[2] += 5.0  # modify the last event only
    seq_b = EventSequence(torch.tensor([1.0, 2.5, 4.0]), marks_b, 5.0)
    pa = dyn.evolve(seq_a)
    pb = dyn.evolve(seq_b)
    for t in (0.5, 1.5, 2.5, 3.9, 4.0):
        assert torch.equal(pa.h_at(t).detach(), pb.h_at(t).detach())
    assert not torch.allclose(pa.h_at(4.5).detach(), pb.h_at(4.5).detach())


def test_compensator_monotone():
    dyn, _ = make_dynamics(seed=11)
    seq = seq3(seed=12)
    path = dyn.evolve(seq)
    ts = [0.0, 0.4, 0.99, 1.0, 1.6, 2.5, 3.0, 4.0, 4.9, 5.0]
    vals = [float(path.compensator_at(t).detach()) for t in ts]
    assert all(b >= a - 1e-12 for a, b in zip(vals[:-1], vals[1:]))


def test_state_query_out_of_window():
    dyn, _ = make_dynamics()
    path = dyn.evolve(seq3())
    with pytest.raises(ValueError):
        path.state_at(-0.1)
    with pytest.raises(ValueError):
        path.state_at(5.5)


def test_drift_penalty_zero_at_zero_init():
    dyn, _ = make_dynamics(seed=13)
    path = dyn.evolve(seq3(seed=14))
    # f_h has a zero-initialized last layer, so the penalty vanishes exactly
    assert float(dyn.drift_penalty(path)) == 0.0
