"""Classical temporal baselines and the conditional-KDE spatial baseline.

Everything here has a closed-form compensator: homogeneous Poisson,
exponential-kernel Hawkes (univariate likelihood, multivariate simulation via
Ogata thinning), and the self-correcting process.  Parameter fitting is direct
likelihood optimization in log-space.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import List, Optional, Sequence, Tuple

import numpy as np
from scipy.optimize import minimize


class NonPositiveRate(ValueError):
    pass


class ExplosionGuard(RuntimeError):
    """Simulation exceeded the event-count cap."""


def _times(seq) -> np.ndarray:
    return np.asarray(seq.times, dtype=float)


# ---------------------------------------------------------------------------
# Homogeneous Poisson


def poisson_loglik(seq, mu: float) -> float:
    if mu <= 0:
        raise NonPositiveRate("mu must be > 0")
    return len(seq) * math.log(mu) - mu * seq.T


def fit_poisson(seqs: Sequence) -> float:
    """MLE: pooled event count over pooled observation time."""
    n = sum(len(s) for s in seqs)
    T = sum(s.T for s in seqs)
    return max(n / T, 1e-10)


# ---------------------------------------------------------------------------
# Exponential-kernel Hawkes


@dataclass
class HawkesParams:
    """mu + sum_j alpha exp(-beta (t - t_j)); multivariate uses a matrix
    alpha[k][l]: excitation of dimension l by events in dimension k, with a
    shared decay beta."""

    mu: np.ndarray
    alpha: np.ndarray
    beta: float

    def __post_init__(self):
        self.mu = np.atleast_1d(np.asarray(self.mu, dtype=float))
        self.alpha = np.asarray(self.alpha, dtype=float)
        if self.alpha.ndim == 0:
            self.alpha = self.alpha.reshape(1, 1)
        K = self.alpha.shape[0]
        if self.alpha.shape != (K, K):
            raise ValueError(f"alpha must be square, got {self.alpha.shape}")
        if self.mu.shape[0] == 1 and K > 1:
            self.mu = np.full(K, float(self.mu[0]))
        if self.mu.shape[0] != K:
            raise ValueError("mu length must match alpha dimension")
        if np.any(self.mu <= 0) or self.beta <= 0 or np.any(self.alpha < 0):
            raise NonPositiveRate("require mu > 0, beta > 0, alpha >= 0")

    @property
    def dim(self) -> int:
        return self.mu.shape[0]

    def branching_ratio(self) -> float:
        return float(np.max(np.abs(np.linalg.eigvals(self.alpha / self.beta))))


def hawkes_intensity(t: float, history: np.ndarray, mu: float, alpha: float,
                     beta: float) -> float:
    past = history[history < t]
    return mu + alpha * np.exp(-beta * (t - past)).sum()


def hawkes_loglik(seq, mu: float, alpha: float, beta: float) -> float:
    """Univariate exact log-likelihood with the O(n) intensity recursion."""
    if mu <= 0 or beta <= 0 or alpha < 0:
        raise NonPositiveRate("require mu > 0, beta > 0, alpha >= 0")
    t = _times(seq)
    n = len(t)
    ll = -mu * seq.T
    if n:
        ll -= (alpha / beta) * np.sum(1.0 - np.exp(-beta * (seq.T - t)))
        a = 0.0  # excitation just before the current event
        prev = None
        for ti in t:
            if prev is not None:
                a = (a + alpha) * math.exp(-beta * (ti - prev))
            ll += math.log(mu + a)
            prev = ti
    return float(ll)


def hawkes_compensator(seq, mu: float, alpha: float, beta: float,
                       t: Optional[float] = None) -> float:
    """Closed-form integral of the intensity over [0, t]."""
    tt = seq.T if t is None else t
    past = _times(seq)
    past = past[past < tt]
    return float(mu * tt + (alpha / beta) * np.sum(1.0 - np.exp(-beta * (tt - past))))


def fit_hawkes(seqs: Sequence) -> Tuple[float, float, float]:
    """Direct likelihood optimization of (mu, alpha, beta) in log-space."""

    def nll(theta):
        mu, alpha, beta = np.exp(theta)
        try:
            return -sum(hawkes_loglik(s, mu, alpha, beta) for s in seqs)
        except (NonPositiveRate, OverflowError):
            return 1e12

    mu0 = fit_poisson(seqs)
    best = None
    for a0, b0 in ((0.5, 1.0), (0.1, 0.5), (1.0, 2.0)):
        res = minimize(nll, np.log([mu0 * 0.5, a0, b0]), method="Nelder-Mead",
                       options={"maxiter": 2000, "xatol": 1e-6, "fatol": 1e-8})
        if best is None or res.fun < best.fun:
            best = res
    mu, alpha, beta = np.exp(best.x)
    return float(mu), float(alpha), float(beta)


def hawkes_sample(params: HawkesParams, T: float, seed: int,
                  max_events: int = 100_000):
    """Ogata thinning for the multivariate exponential Hawkes process.

    Returns (times, dims).  Between events the total intensity only decays,
    so the intensity at the current time is a valid majorant.
    """
    if params.branching_ratio() >= 1.0:
        raise ValueError("unstable Hawkes parameters (branching ratio >= 1)")
    rng = np.random.default_rng(seed)
    K = params.dim
    excite = np.zeros(K)  # current excitation per target dimension
    t = 0.0
    times: List[float] = []
    dims: List[int] = []
    mu = params.mu
    beta = params.beta
    while True:
        lam_bar = float(mu.sum() + excite.sum())
        w = rng.exponential(1.0 / lam_bar)
        t_new = t + w
        if t_new > T:
            break
        decay = math.exp(-beta * w)
        excite = excite * decay
        t = t_new
        lam = mu + excite
        total = float(lam.sum())
        if rng.uniform() * lam_bar <= total:
            k = int(rng.choice(K, p=lam / total))
            times.append(t)
            dims.append(k)
            excite = excite + params.alpha[k, :]
            if len(times) > max_events:
                raise ExplosionGuard(f"more than {max_events} events before T")
    return np.asarray(times), np.asarray(dims, dtype=int)


def time_rescaled_gaps(seqs: Sequence, mu: float, alpha: float, beta: float) -> np.ndarray:
    """Compensator increments between successive events; Exp(1) under a
    correctly specified model (time-rescaling theorem)."""
    out = []
    for s in seqs:
        t = _times(s)
        lam = np.array([hawkes_compensator(s, mu, alpha, beta, ti) for ti in t])
        out.append(np.diff(np.concatenate([[0.0], lam])))
    return np.concatenate(out) if out else np.zeros(0)


# ---------------------------------------------------------------------------
# Self-correcting process


def self_correcting_loglik(seq, mu: float, alpha: float) -> float:
    """lambda(t) = exp(mu t - alpha N(t-)); piecewise-exponential compensator."""
    t = np.concatenate([[0.0], _times(seq), [seq.T]])
    n = len(seq)
    ll = 0.0
    for i, ti in enumerate(_times(seq)):
        ll += mu * ti - alpha * i
    for i in range(n + 1):
        lo, hi = t[i], t[i + 1]
        if hi <= lo:
            continue
        if abs(mu) < 1e-12:
            ll -= math.exp(-alpha * i) * (hi - lo)
        else:
            ll -= math.exp(-alpha * i) * (math.exp(mu * hi) - math.exp(mu * lo)) / mu
    return float(ll)


def self_correcting_compensator(seq, mu: float, alpha: float,
                                t: Optional[float] = None) -> float:
    tt = seq.T if t is None else t
    times = _times(seq)
    knots = np.concatenate([[0.0], times[times < tt], [tt]])
    comp = 0.0
    for i in range(len(knots) - 1):
        lo, hi = knots[i], knots[i + 1]
        if abs(mu) < 1e-12:
            comp += math.exp(-alpha * i) * (hi - lo)
        else:
            comp += math.exp(-alpha * i) * (math.exp(mu * hi) - math.exp(mu * lo)) / mu
    return float(comp)


def fit_self_correcting(seqs: Sequence) -> Tuple[float, float]:
    def nll(theta):
        mu, alpha = theta
        try:
            return -sum(self_correcting_loglik(s, mu, alpha) for s in seqs)
        except OverflowError:
            return 1e12

    res = minimize(nll, np.array([0.1, 0.1]), method="Nelder-Mead",
                   options={"maxiter": 2000})
    return float(res.x[0]), float(res.x[1])


# ---------------------------------------------------------------------------
# Conditional KDE spatial baseline


@dataclass
class CondKDE:
    """History KDE: Gaussians at past locations, softmax-in-time weights.

    Two learnable parameters: spatial bandwidth sigma2 and temporal decay tau.
    The first event of a sequence (empty history) falls back to a global
    isotropic Gaussian fitted on the training marks.
    """

    sigma2: float = 1.0
    tau: float = 1.0
    global_mean: Optional[np.ndarray] = None
    global_var: float = 1.0

    def _weights(self, times: np.ndarray, t_i: float) -> np.ndarray:
        z = (times - t_i) / self.tau
        z = z - z.max()
        w = np.exp(z)
        return w / w.sum()

    def logprob_event(self, seq, i: int) -> float:
        """log p(x_i | history); 0-based event index."""
        marks = np.asarray(seq.marks, dtype=float)
        times = _times(seq)
        d = marks.shape[1]
        x = marks[i]
        if i == 0:
            mean = self.global_mean if self.global_mean is not None else np.zeros(d)
            var = self.global_var
            return float(-0.5 * np.sum((x - mean) ** 2) / var
                         - 0.5 * d * math.log(2 * math.pi * var))
        w = self._weights(times[:i], times[i])
        sq = np.sum((x - marks[:i]) ** 2, axis=1)
        logcomp = -0.5 * sq / self.sigma2 - 0.5 * d * math.log(2 * math.pi * self.sigma2)
        m = logcomp.max()
        return float(m + math.log(np.sum(w * np.exp(logcomp - m))))

    def loglik(self, seq) -> float:
        return sum(self.logprob_event(seq, i) for i in range(len(seq)))

    def fit(self, seqs: Sequence) -> "CondKDE":
        marks = np.concatenate([np.asarray(s.marks, dtype=float) for s in seqs
                                if len(s)], axis=0)
        self.global_mean = marks.mean(axis=0)
        self.global_var = float(marks.var())
        if self.global_var <= 0:
            self.global_var = 1.0

        def nll(theta):
            self.sigma2, self.tau = np.exp(theta)
            return -sum(self.loglik(s) for s in seqs)

        res = minimize(nll, np.log([self.sigma2, self.tau]), method="Nelder-Mead",
                       options={"maxiter": 500, "xatol": 1e-5, "fatol": 1e-7})
        self.sigma2, self.tau = [float(v) for v in np.exp(res.x)]
        return self
