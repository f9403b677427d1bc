import math

import numpy as np
import pytest
import torch

from stppflow.diff import ParameterStore
from stppflow.latent import EventSequence, LatentDynamics
from stppflow.odeint import SolverConfig
from stppflow.spatial import (TIME_SHIFT, AttentiveCNF, GMMDecoder, JumpCNF,
                              TimeVaryingCNF, TraceEstimator,
                              divergence_exact, std_normal_logpdf,
                              trace_estimate)

CFG = SolverConfig(rtol=1e-6, atol=1e-6)


def build(kind, seed=0, hidden_dim=8):
    store = ParameterStore()
    gen = torch.Generator().manual_seed(seed)
    dyn = LatentDynamics(store, gen, mark_dim=2, hidden_dim=hidden_dim,
                         f_widths=(16, 16))
    if kind == "tv":
        model = TimeVaryingCNF(store, gen, 2)
    elif kind == "jump":
        model = JumpCNF(store, gen, 2, hidden_dim)
    elif kind == "attn":
        model = AttentiveCNF(store, gen, 2, hidden_dim)
    else:
        model = GMMDecoder(store, gen, 2, hidden_dim)
    return model, dyn, store


def seq3(seed=0, T=3.0):
    gen = torch.Generator().manual_seed(seed)
    return EventSequence(torch.tensor([0.5, 1.4, 2.2]),
                         torch.randn(3, 2, generator=gen), T)


# ---------------------------------------------------------------------------
# Trace estimation


def test_trace_exact_and_hutchinson_diag():
    jac = torch.diag(torch.tensor([1.0, 2.0, 3.0]))
    assert float(trace_estimate(jac, TraceEstimator("exact"))) == 6.0
    est = TraceEstimator("hutchinson", probes=100_000, seed=0)
    val = float(trace_estimate(jac, est))
    # var(v^T A v) for diagonal A is 2*sum(a_ii^2)
    sigma_hat = math.sqrt(2 * (1 + 4 + 9) / 100_000)
    assert abs(val - 6.0) < 3 * sigma_hat


def test_trace_antisymmetric_zero():
    jac = torch.tensor([[0.0, 2.0], [-2.0, 0.0]])
    assert float(trace_estimate(jac, TraceEstimator("exact"))) == 0.0


def test_detached_estimator_equal_mean_lower_variance():
    gen = torch.Generator().manual_seed(1)
    # block-triangular Jacobian of a 2-event coupled system (d=2 each)
    jac = torch.zeros(4, 4)
    jac[:2, :2] = torch.randn(2, 2, generator=gen)
    jac[2:, 2:] = torch.randn(2, 2, generator=gen)
    jac[2:, :2] = 3.0 * torch.randn(2, 2, generator=gen)  # strong cross block
    blocks = [(0, 2), (2, 4)]
    true_tr = float(torch.diagonal(jac).sum())

    plain, det = [], []
    for probe in range(10_000):
        plain.append(float(trace_estimate(
            jac, TraceEstimator("hutchinson", seed=probe))))
        det.append(float(trace_estimate(
            jac, TraceEstimator("hutchinson_detached", seed=probe), blocks)))
    plain, det = np.array(plain), np.array(det)
    assert abs(det.mean() - true_tr) < 3 * det.std() / 100
    assert abs(plain.mean() - true_tr) < 3 * plain.std() / 100
    assert det.var() < plain.var()


def test_three_block_triangular_expectation():
    gen = torch.Generator().manual_seed(2)
    jac = torch.zeros(6, 6)
    for lo in (0, 2, 4):
        jac[lo:lo + 2, lo:lo + 2] = torch.randn(2, 2, generator=gen)
        jac[lo:lo + 2, :lo] = torch.randn(2, lo, generator=gen)
    blocks = [(0, 2), (2, 4), (4, 6)]
    true_tr = float(torch.diagonal(jac).sum())
    vals = np.array([float(trace_estimate(
        jac, TraceEstimator("hutchinson_detached", seed=s), blocks))
        for s in range(20_000)])
    assert abs(vals.mean() - true_tr) < 3 * vals.std() / math.sqrt(20_000)


def test_divergence_exact_matches_jacobian():
    gen = torch.Generator().manual_seed(3)
    w = torch.randn(2, 2, generator=gen)
    x = torch.randn(4, 2, generator=gen).requires_grad_(True)
    f = torch.tanh(x @ w.T)
    div = divergence_exact(f, x)
    for i in range(4):
        jac = torch.stack([torch.autograd.grad(f[i, j], x, retain_graph=True)[0][i]
                           for j in range(2)])
        assert abs(float(div[i]) - float(torch.diagonal(jac).sum())) < 1e-10


def test_estimator_validation():
    with pytest.raises(ValueError):
        TraceEstimator("bogus")
    with pytest.raises(ValueError):
        TraceEstimator("exact", probes=0)


# ---------------------------------------------------------------------------
# Time-varying CNF


def test_tv_cnf_zero_init_standard_normal():
    model, _, _ = build("tv")
    gen = torch.Generator().manual_seed(4)
    xs = torch.randn(5, 2, generator=gen)
    ts = torch.tensor([0.1, 0.5, 1.0, 2.0, 2.5])
    lp = model.logprob_events(ts, xs, CFG)
    assert float((lp - std_normal_logpdf(xs)).abs().max()) < 1e-9


def test_tv_cnf_constant_drift_translation():
    model, _, store = build("tv", seed=5)
    a = torch.tensor([0.7, -0.3])
    last = model.net.layers[-1]
    with torch.no_grad():
        last.w.zero_()
        last.b.copy_(a)
    t = 1.5
    x = torch.tensor([[0.4, 0.9]])
    lp = model.logprob_events(torch.tensor([t]), x, CFG)
    expect = std_normal_logpdf(x - a * (t + TIME_SHIFT))
    assert abs(float(lp) - float(expect)) < 1e-6


def test_tv_cnf_empty():
    model, _, _ = build("tv")
    out = model.logprob_events(torch.zeros(0), torch.zeros(0, 2), CFG)
    assert out.shape == (0,)


def test_tv_cnf_sample_matches_density_normalization():
    model, _, _ = build("tv", seed=6)
    # zero-init drift: samples are standard normal
    gen = torch.Generator().manual_seed(7)
    xs = model.sample(1.0, 2000, gen, CFG)
    assert abs(float(xs.mean())) < 0.1
    assert abs(float(xs.var()) - 1.0) < 0.12


# ---------------------------------------------------------------------------
# Jump CNF


def test_jump_cnf_zero_init_standard_normal():
    model, dyn, _ = build("jump", seed=8)
    seq = seq3(seed=9)
    path = dyn.evolve(seq, CFG)
    lp = model.logprob_events(seq, path, CFG)
    # jump hypernetwork is zero-initialized: identity jumps, and the drift is
    # zero-initialized, so the density is the standard normal
    assert float((lp - std_normal_logpdf(seq.marks)).abs().max()) < 1e-9


def test_jump_cnf_first_event_matches_tv_form():
    model, dyn, store = build("jump", seed=10)
    # randomize the drift output layer; keep identity jumps
    gen = torch.Generator().manual_seed(11)
    with torch.no_grad():
        model.net.layers[-1].w.copy_(0.3 * torch.randn_like(model.net.layers[-1].w))
        model.net.layers[-1].b.copy_(0.1 * torch.randn(2, generator=gen))
    seq = seq3(seed=12)
    path = dyn.evolve(seq, CFG)
    lp = model.logprob_events(seq, path, CFG)
    # the first event saw no prior jumps; solving it alone must agree
    one = EventSequence(seq.times[:1], seq.marks[:1], seq.T)
    path1 = dyn.evolve(one, CFG)
    lp1 = model.logprob_events(one, path1, CFG)
    assert abs(float(lp[0]) - float(lp1[0])) < 1e-6


def test_jump_cnf_composed_logdensity_matches_jacobian_oracle():
    model, dyn, _ = build("jump", seed=13)
    gen = torch.Generator().manual_seed(14)
    with torch.no_grad():
        model.net.layers[-1].w.copy_(0.2 * torch.randn_like(model.net.layers[-1].w))
        model.hyper.layers[-1].w.copy_(
            0.2 * torch.randn_like(model.hyper.layers[-1].w))
        model.hyper.layers[-1].b.copy_(
            0.2 * torch.randn(model.flows.param_size, generator=gen))
    seq = seq3(seed=15)
    cfg = SolverConfig(rtol=1e-9, atol=1e-9)
    path = dyn.evolve(seq, cfg)
    lp = model.logprob_events(seq, path, cfg)

    # oracle: differentiate the full normalizing map x -> z for the last event
    i = 2
    x = seq.marks[i].clone().requires_grad_(True)
    state = x.unsqueeze(0)  # (1, 2) batch row
    s_times = [float(t) + TIME_SHIFT for t in seq.times]
    cur = s_times[i]
    from stppflow.odeint import solve
    for k in range(i, 0, -1):
        def f(t, y, kk=k):
            h = path.h_on_interval(kk, t - TIME_SHIFT)
            return model.drift(t, y, h)
        state = solve(f, state, cur, s_times[k - 1], cfg).endpoint_state
        raw = model.jump_params(path.pre_jump[k - 1]).detach()
        state, _ = model.flows.forward(state, raw)
        cur = s_times[k - 1]

    def f0(t, y):
        h = path.h_on_interval(0, t - TIME_SHIFT)
        return model.drift(t, y, h)
    z = solve(f0, state, cur, 0.0, cfg).endpoint_state
    jac = torch.stack([torch.autograd.grad(z[0, j], x, retain_graph=True)[0]
                       for j in range(2)])
    lp_oracle = float(std_normal_logpdf(z.detach())) \
        + float(torch.logdet(jac.detach()))
    assert abs(float(lp[i]) - lp_oracle) < 1e-4


def test_jump_cnf_continuity_between_events():
    model, dyn, _ = build("jump", seed=16)
    seq = seq3(seed=17)
    path = dyn.evolve(seq, CFG)
    prefix = EventSequence(seq.times[:1], seq.marks[:1], seq.T)
    ppath = dyn.evolve(prefix, CFG)
    x = torch.tensor([[0.2, -0.4]])
    ts = np.linspace(0.55, 1.35, 9)  # strictly inside (t_1, t_2)
    vals = [float(model.logprob_grid(float(t), x, prefix, ppath, CFG)) for t in ts]
    diffs = np.abs(np.diff(vals))
    assert diffs.max() < 0.2  # smooth, no jump inside the open interval


def test_jump_cnf_sample_roundtrip_density_finite():
    model, dyn, _ = build("jump", seed=18)
    seq = seq3(seed=19)
    path = dyn.evolve(seq, CFG)
    gen = torch.Generator().manual_seed(20)
    xs = model.sample(2.5, 4, seq, path, gen, CFG)
    assert xs.shape == (4, 2)
    lp = model.logprob_grid(2.5, xs, seq, path, CFG)
    assert torch.isfinite(lp).all()


# ---------------------------------------------------------------------------
# Attentive CNF


def test_attn_cnf_zero_init_standard_normal():
    model, dyn, _ = build("attn", seed=21)
    seq = seq3(seed=22)
    path = dyn.evolve(seq, CFG)
    lp = model.logprob_events(seq, path, CFG)
    assert float((lp - std_normal_logpdf(seq.marks)).abs().max()) < 1e-9


def randomize_attn(model, seed):
    gen = torch.Generator().manual_seed(seed)
    with torch.no_grad():
        last = model.out.layers[-1]
        last.w.copy_(0.3 * torch.randn_like(last.w))
        last.b.copy_(0.1 * torch.randn(last.dout, generator=gen))


def test_attn_cnf_single_event_matches_aux_flow():
    model, dyn, _ = build("attn", seed=23)
    randomize_attn(model, 24)
    gen = torch.Generator().manual_seed(25)
    seq = EventSequence(torch.tensor([1.0]), torch.randn(1, 2, generator=gen), 2.0)
    path = dyn.evolve(seq, CFG)
    lp = model.logprob_events(seq, path, CFG)
    assert torch.isfinite(lp).all() and lp.shape == (1,)


def test_attn_cnf_causal_perturbation():
    model, dyn, _ = build("attn", seed=26)
    randomize_attn(model, 27)
    seq = seq3(seed=28)
    marks_b = seq.marks.clone()
    marks_b[2] += 3.0
    seq_b = EventSequence(seq.times, marks_b, seq.T)
    cfg = SolverConfig(rtol=1e-8, atol=1e-8)
    lp_a = model.logprob_events(seq, dyn.evolve(seq, cfg), cfg)
    lp_b = model.logprob_events(seq_b, dyn.evolve(seq_b, cfg), cfg)
    # only the perturbed (last) event's log-density may move
    assert abs(float(lp_a[0] - lp_b[0])) < 1e-7
    assert abs(float(lp_a[1] - lp_b[1])) < 1e-7
    assert abs(float(lp_a[2] - lp_b[2])) > 1e-4


def test_attn_cnf_joint_solve_matches_sequential_replay():
    model, dyn, _ = build("attn", seed=29)
    randomize_attn(model, 30)
    seq = seq3(seed=31)
    cfg = SolverConfig(rtol=1e-8, atol=1e-8)
    path = dyn.evolve(seq, cfg)
    joint = model.logprob_events(seq, path, cfg)
    # sequential replay: event i solved jointly with only events < i
    for i in range(3):
        prefix = EventSequence(seq.times[: i + 1], seq.marks[: i + 1], seq.T)
        ppath = dyn.evolve(prefix, cfg)
        lp = model.logprob_events(prefix, ppath, cfg)
        assert abs(float(lp[i]) - float(joint[i])) < 1e-4


def test_attn_cnf_estimator_consistency():
    model, dyn, _ = build("attn", seed=32)
    randomize_attn(model, 33)
    seq = seq3(seed=34)
    path = dyn.evolve(seq, CFG)
    exact = model.logprob_events(seq, path, CFG, TraceEstimator("exact")).sum()
    hutch = model.logprob_events(
        seq, path, CFG, TraceEstimator("hutchinson", seed=0))
    detached = model.logprob_events(
        seq, path, CFG, TraceEstimator("hutchinson_detached", seed=0))
    # many-probe averages approach the exact value; single draws stay finite
    assert torch.isfinite(hutch).all() and torch.isfinite(detached).all()
    n_probes = 64
    vals = [float(model.logprob_events(
        seq, path, CFG, TraceEstimator("hutchinson_detached", seed=s)).sum())
        for s in range(n_probes)]
    vals = np.array(vals)
    sem = vals.std() / math.sqrt(n_probes)
    assert abs(vals.mean() - float(exact)) < max(3 * sem, 0.05)


def test_attn_cnf_sample_finite_logprob():
    model, dyn, _ = build("attn", seed=35)
    randomize_attn(model, 36)
    seq = seq3(seed=37)
    path = dyn.evolve(seq, CFG)
    gen = torch.Generator().manual_seed(38)
    xs = model.sample(2.5, 3, seq, path, gen, CFG)
    lp = model.logprob_grid(2.5, xs, seq, path, CFG)
    assert torch.isfinite(lp).all()


# ---------------------------------------------------------------------------
# GMM decoder


def test_gmm_single_effective_component():
    model, dyn, store = build("gmm", seed=39)
    h = torch.zeros(8)
    with torch.no_grad():
        last = model.net.layers[-1]
        last.w.zero_()
        b = torch.zeros(model.k * (2 * 2 + 1))
        b[2 * model.k * 2] = 50.0  # first mixture logit dominates
        last.b.copy_(b)
    x = torch.tensor([0.3, -1.1])
    lp = model.logprob(x, h)
    assert abs(float(lp) - float(std_normal_logpdf(x.unsqueeze(0)))) < 1e-8


def test_gmm_weights_sum_to_one():
    model, _, _ = build("gmm", seed=40)
    gen = torch.Generator().manual_seed(41)
    h = torch.randn(8, generator=gen)
    _, _, logits = model.params(h)
    w = torch.softmax(logits, -1)
    assert abs(float(w.sum()) - 1.0) < 1e-12


def test_gmm_grid_integral():
    model, _, _ = build("gmm", seed=42)
    gen = torch.Generator().manual_seed(43)
    h = torch.randn(8, generator=gen)
    axis = torch.linspace(-8, 8, 200)
    xx, yy = torch.meshgrid(axis, axis, indexing="ij")
    pts = torch.stack([xx.reshape(-1), yy.reshape(-1)], dim=1)
    p = torch.exp(model.logprob(pts, h))
    cell = float(axis[1] - axis[0]) ** 2
    assert abs(float(p.sum()) * cell - 1.0) < 1e-3


# ---------------------------------------------------------------------------
# Normalization (moderate grid; the acceptance suite uses the full 400x400)


@pytest.mark.parametrize("kind", ["tv", "jump", "attn"])
def test_density_normalizes(kind):
    model, dyn, _ = build(kind, seed=44)
    if kind != "tv":
        randomize_attn(model, 45) if kind == "attn" else None
    if kind == "jump":
        with torch.no_grad():
            model.net.layers[-1].w.copy_(
                0.2 * torch.randn_like(model.net.layers[-1].w))
    seq = seq3(seed=46)
    path = dyn.evolve(seq, CFG)
    axis = torch.linspace(-6, 6, 120)
    xx, yy = torch.meshgrid(axis, axis, indexing="ij")
    pts = torch.stack([xx.reshape(-1), yy.reshape(-1)], dim=1)
    t = 2.5
    if kind == "tv":
        lp = model.logprob_grid(t, pts, CFG)
    else:
        lp = model.logprob_grid(t, pts, seq, path, CFG)
    cell = float(axis[1] - axis[0]) ** 2
    integral = float(torch.exp(lp.detach()).sum()) * cell
    assert 0.98 <= integral <= 1.02
