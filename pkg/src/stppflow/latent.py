"""Continuous-time hidden state with jumps and the temporal likelihood.

Between events the hidden state follows an ODE; at each event it jumps through
a GRU cell fed with the event features.  The state is left-continuous with
right limits: querying exactly at an event time returns the pre-jump value.
The compensator (integral of the ground intensity) rides along as one extra
state dimension in the same solves, so the temporal log-likelihood needs no
extra quadrature.
"""

from __future__ import annotations

import bisect
from dataclasses import dataclass, field
from typing import List, Optional, Tuple

import torch

from .diff import ParameterStore, assert_finite
from .nets import GRUCell, Mlp, TimeMLP
from .odeint import OdeSolution, SolverConfig, solve

Tensor = torch.Tensor


@dataclass
class EventSequence:
    """Ordered events (t_i, x_i) on an observation window [0, T]."""

    times: Tensor  # (n,)
    marks: Tensor  # (n, d)
    T: float

    def __post_init__(self):
        self.times = torch.as_tensor(self.times, dtype=torch.get_default_dtype())
        self.marks = torch.as_tensor(self.marks, dtype=torch.get_default_dtype())
        if self.marks.dim() == 1:
            self.marks = self.marks.reshape(-1, 1)
        n = self.times.shape[0]
        if self.marks.shape[0] != n:
            raise ValueError("times and marks length mismatch")
        if n:
            t = self.times
            if float(t[0]) < 0 or float(t[-1]) > self.T:
                raise ValueError("event times must lie in [0, T]")
            if n > 1 and float((t[1:] - t[:-1]).min()) <= 0:
                raise ValueError("event times must be strictly increasing")

    def __len__(self):
        return self.times.shape[0]

    @property
    def dim(self) -> int:
        return self.marks.shape[1]


@dataclass
class HiddenPath:
    """Piecewise-smooth hidden trajectory with jump records.

    ``intervals[k]`` solves the augmented state (h, Lambda) on
    [boundaries[k], boundaries[k+1]]; boundaries are 0, t_1, ..., t_n, T.
    """

    hidden_dim: int
    T: float
    event_times: List[float]
    intervals: List[OdeSolution]
    pre_jump: List[Tensor]   # h at t_i (left limit)
    post_jump: List[Tensor]  # h just after t_i

    def _interval_index(self, t: float) -> int:
        # left-continuous: t == t_i belongs to the interval ending at t_i
        i = bisect.bisect_left(self.event_times, t)
        return min(i, len(self.intervals) - 1)

    def state_at(self, t: float) -> Tensor:
        """Augmented (h, Lambda) at time t, pre-jump at event times."""
        if not (0.0 <= t <= self.T + 1e-12):
            raise ValueError(f"t={t} outside [0, {self.T}]")
        sol = self.intervals[self._interval_index(t)]
        return sol.eval(max(sol.t0, min(t, sol.t1)))

    def h_at(self, t: float) -> Tensor:
        return self.state_at(t)[: self.hidden_dim]

    def h_on_interval(self, idx: int, t: float) -> Tensor:
        """Hidden state at t read from a specific inter-event interval; at the
        interval's left boundary this is the post-jump limit."""
        sol = self.intervals[idx]
        lo, hi = min(sol.t0, sol.t1), max(sol.t0, sol.t1)
        return sol.eval(max(lo, min(t, hi)))[: self.hidden_dim]

    def compensator_at(self, t: float) -> Tensor:
        return self.state_at(t)[self.hidden_dim]

    @property
    def total_compensator(self) -> Tensor:
        return self.intervals[-1].endpoint_state[self.hidden_dim]


class LatentDynamics:
    """Hidden-state ODE + GRU jumps + softplus ground intensity head."""

    def __init__(self, store: ParameterStore, gen: torch.Generator, mark_dim: int,
                 hidden_dim: int = 32, f_widths: Tuple[int, ...] = (32, 32),
                 prefix: str = "latent"):
        self.hidden_dim = hidden_dim
        self.mark_dim = mark_dim
        self.h0 = store.add(prefix + ".h0", torch.zeros(hidden_dim))
        # drift takes (t, h) concatenated; zero drift at initialization
        self.f_h = TimeMLP(store, prefix + ".f_h",
                           [hidden_dim + 1, *f_widths, hidden_dim], gen,
                           activation="softplus", zero_init_last=True)
        self.gru = GRUCell(store, prefix + ".gru", mark_dim + 2, hidden_dim, gen)
        self.g_lambda = Mlp(store, prefix + ".g_lambda", [hidden_dim, 64, 1], gen)

    def drift(self, t: float, h: Tensor) -> Tensor:
        tcol = torch.full((*h.shape[:-1], 1), float(t))
        return self.f_h(t, torch.cat([tcol, h], dim=-1))

    def intensity(self, h: Tensor) -> Tensor:
        """Ground intensity lambda*(t) = softplus(g(h)) > 0."""
        return torch.nn.functional.softplus(self.g_lambda(h).squeeze(-1))

    def _aug_drift(self, t: float, state: Tensor) -> Tensor:
        h = state[: self.hidden_dim]
        dh = self.drift(t, h)
        dlam = self.intensity(h).reshape(1)
        return torch.cat([dh, dlam])

    def evolve(self, seq: EventSequence, cfg: Optional[SolverConfig] = None) -> HiddenPath:
        """Integrate the hidden state across [0, T], jumping at each event."""
        cfg = cfg or SolverConfig()
        state = torch.cat([self.h0, torch.zeros(1)])
        times = [float(t) for t in seq.times]
        boundaries = [0.0] + times + [seq.T]
        intervals: List[OdeSolution] = []
        pre, post = [], []
        for k in range(len(boundaries) - 1):
            lo, hi = boundaries[k], boundaries[k + 1]
            sol = solve(self._aug_drift, state, lo, hi, cfg, dense=True)
            intervals.append(sol)
            state = sol.endpoint_state
            if k < len(times):
                h_pre = state[: self.hidden_dim]
                pre.append(h_pre)
                gap = times[k] - boundaries[k]
                feat = torch.cat([
                    torch.tensor([gap, times[k]]),
                    seq.marks[k],
                ])
                h_post = self.gru(h_pre, feat)
                post.append(h_post)
                state = torch.cat([h_post, state[self.hidden_dim:]])
        return HiddenPath(self.hidden_dim, seq.T, times, intervals, pre, post)

    def temporal_loglik(self, seq: EventSequence,
                        cfg: Optional[SolverConfig] = None,
                        path: Optional[HiddenPath] = None) -> Tuple[Tensor, HiddenPath]:
        """sum_i log lambda*(t_i) - integral_0^T lambda*; returns (ll, path)."""
        if path is None:
            path = self.evolve(seq, cfg)
        ll = -path.total_compensator
        for h_pre in path.pre_jump:
            ll = ll + torch.log(self.intensity(h_pre))
        return assert_finite(ll, "temporal log-likelihood"), path

    def drift_penalty(self, path: HiddenPath) -> Tensor:
        """Mean squared drift norm over the accepted solver knots."""
        total = torch.zeros(())
        count = 0
        for sol in path.intervals:
            for knot in sol.dense_knots or []:
                h = knot.y1[: self.hidden_dim]
                total = total + (self.drift(knot.t1, h) ** 2).sum()
                count += 1
        if count == 0:
            return total
        return total / count
