"""Spatial (mark) density models built on continuous normalizing flows.

Three flow models are provided, all evaluating exact per-event conditional
log-densities in the normalizing direction (data at its event time mapped back
to a standard-normal base at time 0):

* TimeVaryingCNF - unconditional; all events solved in one batched call.
* JumpCNF - drift conditioned on the hidden state, with radial-flow jumps at
  past event times; evaluated with one solve per inter-event segment.
* AttentiveCNF - drift couples each event to all earlier ones through causal
  multihead attention; one joint solve for the whole sequence.

Plus a Gaussian-mixture decoder baseline and trace estimation utilities.

Data on a window [0, T] lives on the flow-time interval [2, T+2]; the base
distribution sits at flow time 0.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import List, Optional, Sequence, Tuple

import torch

from .diff import ParameterStore, assert_finite
from .latent import EventSequence, HiddenPath
from .nets import ActNorm, AttentionBlock, Linear, Mlp, RadialFlowStack, TimeMLP
from .odeint import IntervalBatch, SolverConfig, solve, solve_batch_unit

Tensor = torch.Tensor

TIME_SHIFT = 2.0  # flow-time offset of the data interval


def std_normal_logpdf(x: Tensor) -> Tensor:
    d = x.shape[-1]
    return -0.5 * (x * x).sum(-1) - 0.5 * d * math.log(2 * math.pi)


# ---------------------------------------------------------------------------
# Trace estimation


@dataclass
class TraceEstimator:
    """How to evaluate tr(df/dx) along a flow trajectory."""

    mode: str = "exact"  # exact | hutchinson | hutchinson_detached
    probes: int = 1
    seed: int = 0

    def __post_init__(self):
        if self.mode not in ("exact", "hutchinson", "hutchinson_detached"):
            raise ValueError(f"unknown trace mode {self.mode!r}")
        if self.probes < 1:
            raise ValueError("probes must be >= 1")

    def generator(self) -> torch.Generator:
        return torch.Generator().manual_seed(self.seed)


def _with_grad(x: Tensor) -> Tensor:
    return x if x.requires_grad else x.detach().requires_grad_(True)


def divergence_exact(f: Tensor, x: Tensor) -> Tensor:
    """Row-wise tr(df/dx) via d basis-vector backward passes.

    Valid when the rows of ``f`` are computed independently from the rows of
    ``x`` (or cross-row paths have been detached).
    """
    d = x.shape[-1]
    div = torch.zeros(x.shape[:-1])
    for j in range(d):
        g = torch.autograd.grad(f[..., j].sum(), x, create_graph=True,
                                retain_graph=True)[0]
        div = div + g[..., j]
    return div


def divergence_hutchinson(f: Tensor, x: Tensor, v: Tensor) -> Tensor:
    """Row-wise v^T (df/dx) v for a fixed probe v (one per trajectory)."""
    g = torch.autograd.grad((f * v).sum(), x, create_graph=True,
                            retain_graph=True)[0]
    return (g * v).sum(-1)


def trace_estimate(jac: Tensor, est: TraceEstimator,
                   blocks: Optional[Sequence[Tuple[int, int]]] = None) -> Tensor:
    """Trace of an explicit Jacobian under the chosen estimator.

    ``blocks`` (start, stop) index ranges are required for the detached mode:
    cross-block entries are severed before probing, which keeps the
    expectation (the diagonal is untouched) while shrinking the variance.
    """
    jac = torch.as_tensor(jac, dtype=torch.get_default_dtype())
    n = jac.shape[0]
    if est.mode == "exact":
        return torch.diagonal(jac).sum()
    target = jac
    if est.mode == "hutchinson_detached":
        if blocks is None:
            raise ValueError("detached mode needs block structure")
        masked = torch.zeros_like(jac)
        for lo, hi in blocks:
            masked[lo:hi, lo:hi] = jac[lo:hi, lo:hi]
        target = masked
    gen = est.generator()
    acc = torch.zeros(())
    for _ in range(est.probes):
        v = torch.randn(n, generator=gen)
        acc = acc + v @ target @ v
    return acc / est.probes


# ---------------------------------------------------------------------------
# Time-varying CNF


class TimeVaryingCNF:
    """Unconditional flow: the mark density varies with event time only."""

    def __init__(self, store: ParameterStore, gen: torch.Generator, dim: int,
                 prefix: str = "tvcnf"):
        self.dim = dim
        self.net = TimeMLP(store, prefix + ".drift", [dim, 64, 64, 64, dim], gen,
                           activation="tdswish", zero_init_last=True)

    def drift(self, t, x: Tensor) -> Tensor:
        return self.net(t, x)

    def _aug(self, est: TraceEstimator, v: Optional[Tensor]):
        def f(t_abs, Y):
            x = _with_grad(Y[..., : self.dim])
            fx = self.drift(t_abs, x)
            if est.mode == "exact":
                tr = divergence_exact(fx, x)
            else:
                tr = divergence_hutchinson(fx, x, v)
            return torch.cat([fx, tr.unsqueeze(-1)], dim=-1)
        return f

    def logprob_events(self, times: Tensor, xs: Tensor,
                       cfg: Optional[SolverConfig] = None,
                       est: Optional[TraceEstimator] = None) -> Tensor:
        """log p(x_i | t_i) for each event; one batched backward solve."""
        cfg = cfg or SolverConfig()
        est = est or TraceEstimator()
        times = torch.as_tensor(times, dtype=torch.get_default_dtype()).reshape(-1)
        n = times.shape[0]
        if n == 0:
            return torch.zeros(0)
        v = None
        if est.mode != "exact":
            v = torch.randn(n, self.dim, generator=est.generator())
        y0 = torch.cat([xs, torch.zeros(n, 1)], dim=-1)
        batch = IntervalBatch(y0, times + TIME_SHIFT, torch.zeros(n))
        end, _ = solve_batch_unit(batch, self._aug(est, v), cfg)
        x0 = end[..., : self.dim]
        c = end[..., self.dim]
        return assert_finite(std_normal_logpdf(x0) + c, "tv-cnf log-density")

    def logprob_grid(self, t: float, xs: Tensor,
                     cfg: Optional[SolverConfig] = None,
                     est: Optional[TraceEstimator] = None,
                     chunk: int = 4096) -> Tensor:
        """log p(x | t) for many query points at one time (shared horizon).

        Evaluated in detached chunks: grid export never needs parameter
        gradients, and dropping the graph keeps memory flat on large grids.
        """
        cfg = cfg or SolverConfig()
        est = est or TraceEstimator()
        out = []
        for lo in range(0, xs.shape[0], chunk):
            xc = xs[lo:lo + chunk]
            m = xc.shape[0]
            v = None
            if est.mode != "exact":
                v = torch.randn(m, self.dim, generator=est.generator())
            f = self._aug(est, v)
            y0 = torch.cat([xc, torch.zeros(m, 1)], dim=-1)
            sol = solve(f, y0, t + TIME_SHIFT, 0.0, cfg)
            end = sol.endpoint_state
            out.append((std_normal_logpdf(end[..., : self.dim])
                        + end[..., self.dim]).detach())
        return torch.cat(out)

    def sample(self, t: float, m: int, gen: torch.Generator,
               cfg: Optional[SolverConfig] = None) -> Tensor:
        cfg = cfg or SolverConfig()
        z = torch.randn(m, self.dim, generator=gen)
        sol = solve(lambda tt, X: self.drift(tt, X), z, 0.0, t + TIME_SHIFT, cfg)
        return sol.endpoint_state


# ---------------------------------------------------------------------------
# Jump CNF


class JumpCNF:
    """Flow whose drift reads the hidden state and whose distribution jumps
    through radial flows (parameters emitted from the pre-jump hidden state)
    at each observed event."""

    def __init__(self, store: ParameterStore, gen: torch.Generator, dim: int,
                 hidden_dim: int, prefix: str = "jumpcnf"):
        self.dim = dim
        self.hidden_dim = hidden_dim
        self.net = TimeMLP(store, prefix + ".drift",
                           [dim + hidden_dim, 64, 64, 64, dim], gen,
                           activation="tdswish", zero_init_last=True)
        self.flows = RadialFlowStack(dim, n_layers=4)
        # zero-init output => identity jumps with zero log-determinant
        self.hyper = Mlp(store, prefix + ".jump_hyper",
                         [hidden_dim, 64, self.flows.param_size], gen,
                         zero_init_last=True)

    def drift(self, t, x: Tensor, h: Tensor) -> Tensor:
        if h.dim() < x.dim():
            h = h.expand(*x.shape[:-1], self.hidden_dim)
        return self.net(t, torch.cat([x, h], dim=-1))

    def jump_params(self, h_pre: Tensor) -> Tensor:
        return self.hyper(h_pre)

    def _segment_drift(self, path: HiddenPath, est, v_holder, idx_holder):
        def f(t, Y):
            x = _with_grad(Y[..., : self.dim])
            h = path.h_on_interval(idx_holder[0], t - TIME_SHIFT)
            fx = self.drift(t, x, h)
            if est.mode == "exact":
                tr = divergence_exact(fx, x)
            else:
                tr = divergence_hutchinson(fx, x, v_holder[0])
            return torch.cat([fx, tr.unsqueeze(-1)], dim=-1)
        return f

    def logprob_events(self, seq: EventSequence, path: HiddenPath,
                       cfg: Optional[SolverConfig] = None,
                       est: Optional[TraceEstimator] = None) -> Tensor:
        """Per-event log p*(x_i | t_i): backward sweep over segments, applying
        the normalizing-direction radial jump of event k to every event
        observed after t_k."""
        cfg = cfg or SolverConfig()
        est = est or TraceEstimator()
        n = len(seq)
        if n == 0:
            return torch.zeros(0)
        gen = est.generator() if est.mode != "exact" else None
        s_times = [float(t) + TIME_SHIFT for t in seq.times]
        v_holder = [None]
        idx_holder = [0]
        f = self._segment_drift(path, est, v_holder, idx_holder)

        active = torch.cat([seq.marks[n - 1:n], torch.zeros(1, 1)], dim=-1)
        order = [n - 1]  # event index of each active row
        vs = [torch.randn(1, self.dim, generator=gen)] if gen else None
        for k in range(n - 1, 0, -1):
            # integrate the active rows down over (t_{k-1}, t_k]
            if gen:
                v_holder[0] = torch.cat(vs, dim=0)
            idx_holder[0] = k
            sol = solve(f, active, s_times[k], s_times[k - 1], cfg)
            active = sol.endpoint_state
            # normalizing-direction jump at t_{k-1}, driven by the pre-jump h
            raw = self.jump_params(path.pre_jump[k - 1])
            x, c = active[..., : self.dim], active[..., self.dim]
            x, ld = self.flows.forward(x, raw)
            active = torch.cat([x, (c + ld).unsqueeze(-1)], dim=-1)
            # event k-1 enters the sweep at its own time, un-jumped
            active = torch.cat(
                [active, torch.cat([seq.marks[k - 1:k], torch.zeros(1, 1)], -1)])
            order.append(k - 1)
            if gen:
                vs.append(torch.randn(1, self.dim, generator=gen))
        if gen:
            v_holder[0] = torch.cat(vs, dim=0)
        idx_holder[0] = 0
        sol = solve(f, active, s_times[0], 0.0, cfg)
        end = sol.endpoint_state
        logp = std_normal_logpdf(end[..., : self.dim]) + end[..., self.dim]
        perm = torch.tensor(order)
        out = logp.new_zeros(n).index_copy(0, perm, logp)
        return assert_finite(out, "jump-cnf log-density")

    def logprob_grid(self, t: float, xs: Tensor, seq_prefix: EventSequence,
                     path: HiddenPath, cfg: Optional[SolverConfig] = None,
                     est: Optional[TraceEstimator] = None,
                     chunk: int = 4096) -> Tensor:
        """log p*(x | t) on query points, conditioned on the events of
        ``seq_prefix`` (all of which predate t).  Detached, chunked."""
        cfg = cfg or SolverConfig()
        est = est or TraceEstimator()
        idx_holder = [0]
        s_times = [float(tt) + TIME_SHIFT for tt in seq_prefix.times]
        boundaries = [0.0] + s_times + [t + TIME_SHIFT]
        out = []
        for lo in range(0, xs.shape[0], chunk):
            xc = xs[lo:lo + chunk]
            m = xc.shape[0]
            v_holder = [None]
            if est.mode != "exact":
                v_holder[0] = torch.randn(m, self.dim, generator=est.generator())
            f = self._segment_drift(path, est, v_holder, idx_holder)
            state = torch.cat([xc, torch.zeros(m, 1)], dim=-1)
            for k in range(len(boundaries) - 1, 0, -1):
                idx_holder[0] = min(k - 1, len(path.intervals) - 1)
                sol = solve(f, state, boundaries[k], boundaries[k - 1], cfg)
                state = sol.endpoint_state
                if k >= 2:  # a jump sits at boundary k-1 (an event time)
                    raw = self.jump_params(path.pre_jump[k - 2])
                    x, c = state[..., : self.dim], state[..., self.dim]
                    x, ld = self.flows.forward(x, raw)
                    state = torch.cat([x, (c + ld).unsqueeze(-1)], dim=-1)
                state = state.detach()
            out.append(std_normal_logpdf(state[..., : self.dim])
                       + state[..., self.dim])
        return torch.cat(out)

    def sample(self, t: float, m: int, seq_prefix: EventSequence,
               path: HiddenPath, gen: torch.Generator,
               cfg: Optional[SolverConfig] = None) -> Tensor:
        """Generative direction: base sample forward through segments,
        inverting each radial jump numerically."""
        cfg = cfg or SolverConfig()
        z = torch.randn(m, self.dim, generator=gen)
        s_times = [float(tt) + TIME_SHIFT for tt in seq_prefix.times]
        boundaries = [0.0] + s_times + [t + TIME_SHIFT]
        x = z
        for k in range(len(boundaries) - 1):
            idx = min(k, len(path.intervals) - 1)

            def fwd(tt, X):
                h = path.h_on_interval(idx, tt - TIME_SHIFT)
                return self.drift(tt, X, h)
            sol = solve(fwd, x, boundaries[k], boundaries[k + 1], cfg)
            x = sol.endpoint_state
            if k + 1 < len(boundaries) - 1:
                raw = self.jump_params(path.pre_jump[k])
                x = self.flows.inverse(x, raw)
        return x


# ---------------------------------------------------------------------------
# Attentive CNF


class AttentiveCNF:
    """Flow whose drift couples each event to earlier events through causal
    multihead attention; hidden states are injected additively into the
    embedding.  An auxiliary non-attentive flow covers base time 0 to the
    start of the data interval."""

    def __init__(self, store: ParameterStore, gen: torch.Generator, dim: int,
                 hidden_dim: int, heads: int = 4, n_blocks: int = 2,
                 attention_variant: str = "dot", prefix: str = "attncnf"):
        self.dim = dim
        self.hidden_dim = hidden_dim
        self.embed = TimeMLP(store, prefix + ".embed", [dim, 64, 64], gen,
                             activation="tdswish", zero_init_last=False)
        self.hproj = Linear(store, prefix + ".hproj", hidden_dim, 64, gen)
        self.blocks = [AttentionBlock(store, f"{prefix}.block{i}", 64, gen,
                                      heads=heads, variant=attention_variant)
                       for i in range(n_blocks)]
        self.out = TimeMLP(store, prefix + ".out", [64, 64, dim], gen,
                           activation="tdswish", zero_init_last=True)

    def f_attn(self, t_rows: Tensor, X: Tensor, h_emb: Optional[Tensor],
               detach_cross: bool = False) -> Tensor:
        """Drift of the coupled system; row i of the output reads rows <= i."""
        e = self.embed(t_rows, X)
        if h_emb is not None:
            e = e + h_emb
        for blk in self.blocks:
            e = blk(e, detach_cross=detach_cross)
        return self.out(t_rows, e)

    def aux_drift(self, t, x: Tensor) -> Tensor:
        """Attention-free flow used on [0, TIME_SHIFT] (same MLPs)."""
        return self.out(t, self.embed(t, x))

    def _h_embed(self, path: HiddenPath) -> Tensor:
        hs = torch.stack(path.pre_jump) if path.pre_jump else \
            torch.zeros(0, self.hidden_dim)
        return self.hproj(hs)

    def logprob_events(self, seq: EventSequence, path: HiddenPath,
                       cfg: Optional[SolverConfig] = None,
                       est: Optional[TraceEstimator] = None) -> Tensor:
        cfg = cfg or SolverConfig()
        est = est or TraceEstimator()
        n = len(seq)
        if n == 0:
            return torch.zeros(0)
        h_emb = self._h_embed(path)
        v = None
        if est.mode != "exact":
            v = torch.randn(n, self.dim, generator=est.generator())

        def f(t_abs, Y):
            x = _with_grad(Y[..., : self.dim])
            fx = self.f_attn(t_abs, x, h_emb, detach_cross=False)
            if est.mode == "hutchinson":
                tr = divergence_hutchinson(fx, x, v)
            else:
                # exact block-diagonal trace (or its detached Hutchinson
                # probe) comes from the cross-detached drift, whose values
                # and own-event partials match the true drift
                fd = self.f_attn(t_abs, x, h_emb, detach_cross=True)
                if est.mode == "exact":
                    tr = divergence_exact(fd, x)
                else:
                    tr = divergence_hutchinson(fd, x, v)
            return torch.cat([fx, tr.unsqueeze(-1)], dim=-1)

        y0 = torch.cat([seq.marks, torch.zeros(n, 1)], dim=-1)
        batch = IntervalBatch(y0, seq.times + TIME_SHIFT,
                              torch.full((n,), TIME_SHIFT))
        end, _ = solve_batch_unit(batch, f, cfg)
        # auxiliary segment [TIME_SHIFT, 0], uncoupled, shared horizon
        end = self._aux_backward(end, cfg, est, v)
        logp = std_normal_logpdf(end[..., : self.dim]) + end[..., self.dim]
        return assert_finite(logp, "attentive-cnf log-density")

    def _aux_backward(self, state: Tensor, cfg, est, v) -> Tensor:
        def g(t, Y):
            x = _with_grad(Y[..., : self.dim])
            fx = self.aux_drift(t, x)
            if est.mode == "exact":
                tr = divergence_exact(fx, x)
            else:
                tr = divergence_hutchinson(fx, x, v)
            return torch.cat([fx, tr.unsqueeze(-1)], dim=-1)
        sol = solve(g, state, TIME_SHIFT, 0.0, cfg)
        return sol.endpoint_state

    def logprob_grid(self, t: float, xs: Tensor, seq_prefix: EventSequence,
                     path: HiddenPath, cfg: Optional[SolverConfig] = None,
                     est: Optional[TraceEstimator] = None,
                     chunk: int = 4096) -> Tensor:
        """Conditional density on query points: each point is appended as the
        (n+1)-th event of the prefix and the coupled system is solved in
        batched chunks."""
        cfg = cfg or SolverConfig()
        est = est or TraceEstimator()
        n = len(seq_prefix)
        h_emb_prefix = self._h_embed(path)  # (n, 64)
        h_query = self.hproj(path.h_at(float(t)))
        h_emb = torch.cat([h_emb_prefix, h_query.unsqueeze(0)])  # (n+1, 64)
        horizons = torch.cat([seq_prefix.times + TIME_SHIFT,
                              torch.tensor([t + TIME_SHIFT])])
        out = []
        for lo in range(0, xs.shape[0], chunk):
            xc = xs[lo:lo + chunk]
            b = xc.shape[0]
            rows = torch.cat([
                seq_prefix.marks.unsqueeze(0).expand(b, n, self.dim),
                xc.unsqueeze(1),
            ], dim=1)  # (b, n+1, d)
            y0 = torch.cat([rows, torch.zeros(b, n + 1, 1)], dim=-1)
            v = None
            if est.mode != "exact":
                v = torch.randn(b, n + 1, self.dim, generator=est.generator())

            def f(t_rows, Y):
                x = _with_grad(Y[..., : self.dim])
                fx = self.f_attn(t_rows, x, h_emb, detach_cross=False)
                if est.mode == "hutchinson":
                    tr = divergence_hutchinson(fx, x, v)
                else:
                    fd = self.f_attn(t_rows, x, h_emb, detach_cross=True)
                    if est.mode == "exact":
                        tr = divergence_exact(fd, x)
                    else:
                        tr = divergence_hutchinson(fd, x, v)
                return torch.cat([fx, tr.unsqueeze(-1)], dim=-1)

            batch = IntervalBatch(
                y0.transpose(0, 1),  # (n+1, b, d+1): rows share horizons
                horizons, torch.full((n + 1,), TIME_SHIFT))

            def f_rows_first(t_rows, Y):
                # solver batches over rows; attention wants (..., n+1, d)
                res = f(t_rows, Y.transpose(0, 1))
                return res.transpose(0, 1)

            end, _ = solve_batch_unit(batch, f_rows_first, cfg)
            end = end.transpose(0, 1)  # (b, n+1, d+1)
            end = self._aux_backward(end, cfg, est, v)
            q = end[:, n, :]
            out.append((std_normal_logpdf(q[..., : self.dim])
                        + q[..., self.dim]).detach())
        return torch.cat(out)

    def sample(self, t: float, m: int, seq_prefix: EventSequence,
               path: HiddenPath, gen: torch.Generator,
               cfg: Optional[SolverConfig] = None,
               chunk: int = 1024) -> Tensor:
        """Draw marks at time t given the prefix: recover the prefix base
        points, then run the coupled system forward with a fresh base row."""
        cfg = cfg or SolverConfig()
        n = len(seq_prefix)
        # invert prefix trajectories to base points (trace not needed)
        est = TraceEstimator(mode="exact")
        h_emb_prefix = self._h_embed(path)
        if n:
            def fb(t_rows, Y):
                x = _with_grad(Y[..., : self.dim])
                fx = self.f_attn(t_rows, x, h_emb_prefix)
                return torch.cat([fx, torch.zeros(*fx.shape[:-1], 1)], dim=-1)
            y0 = torch.cat([seq_prefix.marks, torch.zeros(n, 1)], dim=-1)
            batch = IntervalBatch(y0, seq_prefix.times + TIME_SHIFT,
                                  torch.full((n,), TIME_SHIFT))
            end, _ = solve_batch_unit(batch, fb, cfg)
            mid = end[..., : self.dim]
            sol = solve(lambda tt, X: self.aux_drift(tt, X), mid,
                        TIME_SHIFT, 0.0, cfg)
            base_prefix = sol.endpoint_state
        else:
            base_prefix = torch.zeros(0, self.dim)
        h_query = self.hproj(path.h_at(float(t)))
        h_emb = torch.cat([h_emb_prefix, h_query.unsqueeze(0)])
        horizons = torch.cat([seq_prefix.times + TIME_SHIFT,
                              torch.tensor([t + TIME_SHIFT])])
        samples = []
        for lo in range(0, m, chunk):
            b = min(chunk, m - lo)
            z = torch.randn(b, self.dim, generator=gen)
            rows = torch.cat([
                base_prefix.unsqueeze(0).expand(b, n, self.dim), z.unsqueeze(1)
            ], dim=1)  # (b, n+1, d)
            sol = solve(lambda tt, X: self.aux_drift(tt, X), rows, 0.0,
                        TIME_SHIFT, cfg)
            rows = sol.endpoint_state

            def ff(t_rows, Y):
                return self.f_attn(t_rows, Y.transpose(0, 1),
                                   h_emb).transpose(0, 1)

            batch = IntervalBatch(rows.transpose(0, 1), torch.full((n + 1,), TIME_SHIFT),
                                  horizons)
            end, _ = solve_batch_unit(batch, ff, cfg)
            samples.append(end.transpose(0, 1)[:, n, :])
        return torch.cat(samples)


# ---------------------------------------------------------------------------
# Gaussian-mixture decoder (Neural Jump SDE baseline spatial model)


class GMMDecoder:
    """5-component Gaussian mixture whose parameters are emitted from the
    hidden state; standard normal at zero initialization."""

    def __init__(self, store: ParameterStore, gen: torch.Generator, dim: int,
                 hidden_dim: int, n_components: int = 5, prefix: str = "gmm"):
        self.dim = dim
        self.k = n_components
        self.net = Mlp(store, prefix + ".net",
                       [hidden_dim, 64, n_components * (2 * dim + 1)], gen,
                       zero_init_last=True)

    def params(self, h: Tensor):
        raw = self.net(h)
        k, d = self.k, self.dim
        means = raw[..., : k * d].reshape(*raw.shape[:-1], k, d)
        log_stds = raw[..., k * d: 2 * k * d].reshape(*raw.shape[:-1], k, d)
        logits = raw[..., 2 * k * d:]
        return means, log_stds, logits

    def logprob(self, x: Tensor, h: Tensor) -> Tensor:
        means, log_stds, logits = self.params(h)
        xx = x.unsqueeze(-2)  # (..., 1, d)
        z = (xx - means) * torch.exp(-log_stds)
        comp = -0.5 * (z * z).sum(-1) - log_stds.sum(-1) \
            - 0.5 * self.dim * math.log(2 * math.pi)
        logw = torch.log_softmax(logits, dim=-1)
        return torch.logsumexp(logw + comp, dim=-1)

    def sample(self, h: Tensor, m: int, gen: torch.Generator) -> Tensor:
        means, log_stds, logits = self.params(h)
        w = torch.softmax(logits, dim=-1)
        idx = torch.multinomial(w.expand(m, self.k), 1, generator=gen).squeeze(-1)
        eps = torch.randn(m, self.dim, generator=gen)
        return means[idx] + eps * torch.exp(log_stds[idx])
