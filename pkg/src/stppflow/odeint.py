"""Explicit Runge-Kutta integration with adaptive step control and dense output.

The workhorse is the Dormand-Prince 5(4) pair with a PI step-size controller
and the classic 4th-order dense interpolant.  A fixed-step mode (either rk4 or
dopri5 with ``fixed_step`` set) is available for convergence studies.

Gradients flow through the accepted steps; all step-control decisions are made
on detached values, so the step sequence is treated as a constant by reverse
mode.
"""

from __future__ import annotations

import bisect
import math
from dataclasses import dataclass, field
from typing import Callable, List, Optional, Sequence

import torch

Tensor = torch.Tensor


class OdeError(RuntimeError):
    pass


class NonFinite(OdeError):
    """The vector field returned NaN or Inf."""


class MaxStepsExceeded(OdeError):
    """The step controller could not reach the endpoint within max_steps."""


class OutOfRange(OdeError):
    """Dense evaluation requested outside the solved interval."""


# Dormand-Prince 5(4) tableau.
_C = (0.0, 1 / 5, 3 / 10, 4 / 5, 8 / 9, 1.0, 1.0)
_A = (
    (),
    (1 / 5,),
    (3 / 40, 9 / 40),
    (44 / 45, -56 / 15, 32 / 9),
    (19372 / 6561, -25360 / 2187, 64448 / 6561, -212 / 729),
    (9017 / 3168, -355 / 33, 46732 / 5247, 49 / 176, -5103 / 18656),
    (35 / 384, 0.0, 500 / 1113, 125 / 192, -2187 / 6784, 11 / 84),
)
_B5 = (35 / 384, 0.0, 500 / 1113, 125 / 192, -2187 / 6784, 11 / 84, 0.0)
# b5 - b4, for the embedded error estimate.
_E = (71 / 57600, 0.0, -71 / 16695, 71 / 1920, -17253 / 339200, 22 / 525, -1 / 40)
# Dense-output polynomial coefficients (4th order).
_P = (
    (1.0, -8048581381 / 2820520608, 8663915743 / 2820520608, -12715105075 / 11282082432),
    (0.0, 0.0, 0.0, 0.0),
    (0.0, 131558114200 / 32700410799, -68118460800 / 10900136933, 87487479700 / 32700410799),
    (0.0, -1754552775 / 470086768, 14199869525 / 1410260304, -10690763975 / 1880347072),
    (0.0, 127303824393 / 49829197408, -318862633887 / 49829197408, 701980252875 / 199316789632),
    (0.0, -282668133 / 205662961, 2019193451 / 616988883, -1453857185 / 822651844),
    (0.0, 40617522 / 29380423, -110615467 / 29380423, 69997945 / 29380423),
)


@dataclass
class SolverConfig:
    """Tolerances and step-control knobs for :func:`solve`."""

    method: str = "dopri5"
    rtol: float = 1e-4
    atol: float = 1e-4
    max_steps: int = 100_000
    initial_step: Optional[float] = None
    safety: float = 0.9
    fixed_step: Optional[float] = None  # disables adaptivity when set

    def __post_init__(self):
        if self.method not in ("dopri5", "rk4"):
            raise ValueError(f"unknown method {self.method!r}")
        if self.rtol <= 0 or self.atol <= 0:
            raise ValueError("rtol and atol must be positive")
        if self.max_steps < 1:
            raise ValueError("max_steps must be >= 1")


@dataclass
class _Knot:
    """One accepted step; evaluates the dense interpolant on [t0, t1]."""

    t0: float
    t1: float
    y0: Tensor
    y1: Tensor
    stages: Optional[Tensor]  # (7, *state) for dopri5, else None
    f0: Optional[Tensor] = None  # endpoint slopes for Hermite fallback
    f1: Optional[Tensor] = None

    def eval(self, t: float) -> Tensor:
        if t == self.t0:
            return self.y0
        if t == self.t1:
            return self.y1
        h = self.t1 - self.t0
        theta = (t - self.t0) / h
        if self.stages is not None:
            acc = torch.zeros_like(self.y0)
            p = theta
            for j in range(4):
                coef = torch.zeros_like(self.y0)
                for s in range(7):
                    if _P[s][j] != 0.0:
                        coef = coef + _P[s][j] * self.stages[s]
                acc = acc + p * coef
                p *= theta
            return self.y0 + h * acc
        # cubic Hermite (rk4 path)
        t2 = theta * theta
        t3 = t2 * theta
        h00 = 2 * t3 - 3 * t2 + 1
        h10 = t3 - 2 * t2 + theta
        h01 = -2 * t3 + 3 * t2
        h11 = t3 - t2
        return h00 * self.y0 + h10 * h * self.f0 + h01 * self.y1 + h11 * h * self.f1


@dataclass
class OdeSolution:
    endpoint_state: Tensor
    steps_accepted: int
    steps_rejected: int
    t0: float
    t1: float
    dense_knots: Optional[List[_Knot]] = None

    def eval(self, t: float) -> Tensor:
        return dense_eval(self, t)


def dense_eval(sol: OdeSolution, t: float) -> Tensor:
    """Evaluate the dense interpolant of ``sol`` at time ``t``."""
    if sol.dense_knots is None:
        raise OutOfRange("solution was computed without dense output")
    lo, hi = min(sol.t0, sol.t1), max(sol.t0, sol.t1)
    if not (lo <= t <= hi):
        raise OutOfRange(f"t={t} outside solved interval [{lo}, {hi}]")
    if not sol.dense_knots:
        return sol.endpoint_state
    knots = sol.dense_knots
    if sol.t1 >= sol.t0:
        starts = [k.t0 for k in knots]
        i = bisect.bisect_right(starts, t) - 1
    else:
        starts = [-k.t0 for k in knots]
        i = bisect.bisect_right(starts, -t) - 1
    i = max(0, min(i, len(knots) - 1))
    return knots[i].eval(t)


def _check_finite(k: Tensor):
    if not torch.isfinite(k).all():
        raise NonFinite("vector field returned a non-finite value")


def _error_norm(err: Tensor, y0: Tensor, y1: Tensor, rtol: float, atol: float) -> float:
    scale = atol + rtol * torch.maximum(y0.detach().abs(), y1.detach().abs())
    r = err.detach() / scale
    return float(torch.sqrt((r * r).mean()))


def _initial_step(f, t0: float, y0: Tensor, f0: Tensor, direction: float,
                  rtol: float, atol: float, span: float) -> float:
    # Hairer-Norsett-Wanner starting-step heuristic, order 5.
    scale = atol + rtol * y0.detach().abs()
    d0 = float(torch.sqrt(((y0.detach() / scale) ** 2).mean()))
    d1 = float(torch.sqrt(((f0.detach() / scale) ** 2).mean()))
    h0 = 1e-6 if (d0 < 1e-5 or d1 < 1e-5) else 0.01 * d0 / d1
    h0 = min(h0, span)
    y1 = y0 + h0 * direction * f0
    f1 = f(t0 + h0 * direction, y1)
    _check_finite(f1)
    d2 = float(torch.sqrt((((f1.detach() - f0.detach()) / scale) ** 2).mean())) / h0
    if max(d1, d2) <= 1e-15:
        h1 = max(1e-6, h0 * 1e-3)
    else:
        h1 = (0.01 / max(d1, d2)) ** 0.2
    return min(100 * h0, h1, span)


def _rk_step(f, t: float, y: Tensor, h: float, k1: Optional[Tensor]):
    """One dopri5 step; returns (y5, err, stages)."""
    ks = []
    for s in range(7):
        if s == 0:
            k = k1 if k1 is not None else f(t, y)
        else:
            ys = y
            for j, a in enumerate(_A[s]):
                if a != 0.0:
                    ys = ys + (h * a) * ks[j]
            k = f(t + _C[s] * h, ys)
        _check_finite(k)
        ks.append(k)
    y5 = y
    for j, b in enumerate(_B5):
        if b != 0.0:
            y5 = y5 + (h * b) * ks[j]
    err = torch.zeros_like(y)
    for j, e in enumerate(_E):
        if e != 0.0:
            err = err + (h * e) * ks[j]
    return y5, err, ks


def solve(f: Callable[[float, Tensor], Tensor], x0, t0: float, t1: float,
          cfg: Optional[SolverConfig] = None, dense: bool = False) -> OdeSolution:
    """Integrate dx/dt = f(t, x) from t0 to t1 (t1 < t0 integrates in reverse).

    ``f`` is called with a python float time and the current state tensor and
    must return a tensor of the same shape.
    """
    cfg = cfg or SolverConfig()
    y0 = x0 if isinstance(x0, Tensor) else torch.as_tensor(x0, dtype=torch.get_default_dtype())
    if y0.dtype not in (torch.float32, torch.float64):
        y0 = y0.to(torch.get_default_dtype())
    t0 = float(t0)
    t1 = float(t1)
    if t1 == t0:
        return OdeSolution(y0, 0, 0, t0, t1, [] if dense else None)
    if cfg.method == "rk4" or cfg.fixed_step is not None:
        return _solve_fixed(f, y0, t0, t1, cfg, dense)
    return _solve_adaptive(f, y0, t0, t1, cfg, dense)


def _solve_adaptive(f, y0, t0, t1, cfg, dense):
    direction = 1.0 if t1 > t0 else -1.0
    span = abs(t1 - t0)
    t, y = t0, y0
    f0 = f(t0, y0)
    _check_finite(f0)
    if cfg.initial_step is not None:
        h = min(abs(cfg.initial_step), span)
    else:
        h = _initial_step(f, t0, y0, f0, direction, cfg.rtol, cfg.atol, span)
    h = max(h, 1e-14)
    k1 = f0
    knots: List[_Knot] = [] if dense else None
    accepted = rejected = 0
    err_prev = 1.0
    while direction * (t1 - t) > 0:
        if accepted + rejected >= cfg.max_steps:
            raise MaxStepsExceeded(
                f"no convergence in {cfg.max_steps} steps (t={t}, h={h})")
        h = min(h, abs(t1 - t))
        hd = h * direction
        y_new, err, ks = _rk_step(f, t, y, hd, k1)
        enorm = _error_norm(err, y, y_new, cfg.rtol, cfg.atol)
        if enorm <= 1.0:
            t_new = t1 if h >= abs(t1 - t) * (1 - 1e-12) else t + hd
            if dense:
                knots.append(_Knot(t, t_new, y, y_new, torch.stack(ks)))
            t, y = t_new, y_new
            k1 = ks[6]  # FSAL
            accepted += 1
            # PI controller (Gustafsson): damp growth by the previous error.
            if enorm == 0.0:
                fac = 10.0
            else:
                fac = cfg.safety * enorm ** -0.14 * err_prev ** 0.08
            h *= min(10.0, max(0.2, fac))
            err_prev = max(enorm, 1e-10)
        else:
            rejected += 1
            fac = cfg.safety * enorm ** -0.2
            h *= min(1.0, max(0.2, fac))
            k1 = ks[0]  # step start unchanged, slope still valid
    return OdeSolution(y, accepted, rejected, t0, t1, knots)


def _solve_fixed(f, y0, t0, t1, cfg, dense):
    span = abs(t1 - t0)
    direction = 1.0 if t1 > t0 else -1.0
    step = cfg.fixed_step if cfg.fixed_step is not None else (cfg.initial_step or span / 100)
    n = max(1, int(math.ceil(span / abs(step) - 1e-12)))
    h = span / n * direction
    t, y = t0, y0
    knots: List[_Knot] = [] if dense else None
    k1 = None
    for i in range(n):
        t_new = t1 if i == n - 1 else t0 + (i + 1) * h
        if cfg.method == "dopri5":
            y_new, _, ks = _rk_step(f, t, y, h, k1)
            if dense:
                knots.append(_Knot(t, t_new, y, y_new, torch.stack(ks)))
            k1 = ks[6]
        else:  # classic rk4
            f0 = f(t, y)
            _check_finite(f0)
            k2 = f(t + h / 2, y + h / 2 * f0)
            k3 = f(t + h / 2, y + h / 2 * k2)
            k4 = f(t + h, y + h * k3)
            for k in (k2, k3, k4):
                _check_finite(k)
            y_new = y + h / 6 * (f0 + 2 * k2 + 2 * k3 + k4)
            if dense:
                f1 = f(t_new, y_new)
                _check_finite(f1)
                knots.append(_Knot(t, t_new, y, y_new, None, f0, f1))
        t, y = t_new, y_new
    return OdeSolution(y, n, 0, t0, t1, knots)


@dataclass
class IntervalBatch:
    """M systems sharing one dummy variable s in [0, 1].

    ``x0`` has shape (M, ...); ``t_start`` and ``t_end`` are length-M.
    Zero-length horizons are allowed and leave the state untouched.
    """

    x0: Tensor
    t_start: Tensor
    t_end: Tensor

    def __post_init__(self):
        self.x0 = torch.as_tensor(self.x0, dtype=torch.get_default_dtype()) \
            if not isinstance(self.x0, Tensor) else self.x0
        self.t_start = torch.as_tensor(self.t_start, dtype=torch.get_default_dtype())
        self.t_end = torch.as_tensor(self.t_end, dtype=torch.get_default_dtype())
        if not (torch.isfinite(self.t_start).all() and torch.isfinite(self.t_end).all()):
            raise ValueError("horizons must be finite")


def solve_batch_unit(batch: IntervalBatch, f, cfg: Optional[SolverConfig] = None,
                     dense: bool = False):
    """Solve M systems with distinct horizons in one call over s in [0, 1].

    ``f(t, X)`` receives a length-M tensor of per-system absolute times and the
    stacked state (M, ...), returning the stacked drift.  Cross-system coupling
    inside ``f`` is permitted.  Returns (endpoints, OdeSolution).
    """
    cfg = cfg or SolverConfig()
    span = batch.t_end - batch.t_start  # (M,)
    shape = [span.shape[0]] + [1] * (batch.x0.dim() - 1)
    span_b = span.reshape(shape)

    def g(s, X):
        t_abs = batch.t_start + s * span
        return span_b * f(t_abs, X)

    if float(span.abs().max()) == 0.0:
        sol = OdeSolution(batch.x0, 0, 0, 0.0, 1.0, [] if dense else None)
        return batch.x0, sol
    sol = solve(g, batch.x0, 0.0, 1.0, cfg, dense=dense)
    return sol.endpoint_state, sol
