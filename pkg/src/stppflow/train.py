"""Maximum-likelihood training and per-event log-likelihood evaluation.

A model bundle pairs a temporal model (the latent ODE ground intensity for
neural kinds, a closed-form process for classical kinds) with a spatial model.
The loss is the negative joint log-likelihood per event plus an L2 penalty on
the hidden-state drift.
"""

from __future__ import annotations

import json
import math
import time
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
import torch

from . import classic
from .diff import NonFiniteError, ParameterStore, assert_finite
from .latent import EventSequence, LatentDynamics
from .nets import load_checkpoint, save_checkpoint
from .odeint import SolverConfig
from .spatial import (AttentiveCNF, GMMDecoder, JumpCNF, TimeVaryingCNF,
                      TraceEstimator)

Tensor = torch.Tensor

NEURAL_KINDS = ("tv_cnf", "jump_cnf", "attn_cnf", "njsde_gmm")
CLASSICAL_KINDS = ("kde", "hawkes", "poisson", "self_correcting")
ALL_KINDS = NEURAL_KINDS + CLASSICAL_KINDS


@dataclass
class TrainConfig:
    lr: float = 1e-3
    batch_size: int = 10
    epochs: int = 30
    l2_drift: float = 1e-4
    clip: float = 10.0
    patience: int = 10
    seed: int = 0
    trace: str = "exact"  # exact | hutchinson | hutchinson_detached
    checkpoint_every: int = 1

    def __post_init__(self):
        if self.lr < 0:
            raise ValueError("learning rate must be >= 0")
        if self.l2_drift < 0:
            raise ValueError("drift penalty must be >= 0")

    def estimator(self, seed_offset: int = 0) -> TraceEstimator:
        return TraceEstimator(mode=self.trace, seed=self.seed + seed_offset)


@dataclass
class EvalReport:
    model: str
    split: str
    n_events: int
    temporal_ll: float  # per event; nan when the bundle has no temporal part
    spatial_ll: float   # per event; nan when the bundle has no spatial part
    wall_clock: float = 0.0

    @property
    def joint_ll(self) -> float:
        t = 0.0 if math.isnan(self.temporal_ll) else self.temporal_ll
        s = 0.0 if math.isnan(self.spatial_ll) else self.spatial_ll
        return t + s


# ---------------------------------------------------------------------------
# Model bundles


class NeuralBundle:
    """Latent ODE ground intensity plus one of the neural spatial models."""

    def __init__(self, kind: str, dim: int, seed: int = 0, hidden_dim: int = 32,
                 solver: Optional[SolverConfig] = None):
        if kind not in NEURAL_KINDS:
            raise ValueError(f"unknown neural model {kind!r}; allowed: {NEURAL_KINDS}")
        self.kind = kind
        self.dim = dim
        self.store = ParameterStore()
        gen = torch.Generator().manual_seed(seed)
        self.latent = LatentDynamics(self.store, gen, mark_dim=dim,
                                     hidden_dim=hidden_dim)
        self.solver = solver or SolverConfig()
        if kind == "tv_cnf":
            self.spatial = TimeVaryingCNF(self.store, gen, dim)
        elif kind == "jump_cnf":
            self.spatial = JumpCNF(self.store, gen, dim, hidden_dim)
        elif kind == "attn_cnf":
            self.spatial = AttentiveCNF(self.store, gen, dim, hidden_dim)
        else:
            self.spatial = GMMDecoder(self.store, gen, dim, hidden_dim)

    def loglik_terms(self, seq: EventSequence,
                     est: Optional[TraceEstimator] = None
                     ) -> Tuple[Tensor, Tensor]:
        """(temporal, spatial) log-likelihood of one sequence; the hidden path
        is shared between the two terms."""
        cfg = self.solver
        ll_t, path = self.latent.temporal_loglik(seq, cfg)
        if len(seq) == 0:
            return ll_t, torch.zeros(())
        if self.kind == "tv_cnf":
            ll_s = self.spatial.logprob_events(seq.times, seq.marks, cfg, est).sum()
        elif self.kind == "jump_cnf":
            ll_s = self.spatial.logprob_events(seq, path, cfg, est).sum()
        elif self.kind == "attn_cnf":
            ll_s = self.spatial.logprob_events(seq, path, cfg, est).sum()
        else:
            hs = torch.stack(path.pre_jump)
            ll_s = self.spatial.logprob(seq.marks, hs).sum()
        self._last_path = path
        return ll_t, ll_s

    def save(self, path: str, extra: Optional[dict] = None):
        save_checkpoint(path, self.store, extra or {"kind": self.kind})

    def load(self, path: str) -> dict:
        return load_checkpoint(path, self.store)


class ClassicalBundle:
    """Closed-form baselines behind the same evaluation surface."""

    def __init__(self, kind: str):
        if kind not in CLASSICAL_KINDS:
            raise ValueError(f"unknown classical model {kind!r}; allowed: {CLASSICAL_KINDS}")
        self.kind = kind
        self.params: dict = {}
        self.kde: Optional[classic.CondKDE] = None

    def fit(self, seqs: Sequence[EventSequence]) -> "ClassicalBundle":
        if self.kind == "poisson":
            self.params = {"mu": classic.fit_poisson(seqs)}
        elif self.kind == "hawkes":
            mu, alpha, beta = classic.fit_hawkes(seqs)
            self.params = {"mu": mu, "alpha": alpha, "beta": beta}
        elif self.kind == "self_correcting":
            mu, alpha = classic.fit_self_correcting(seqs)
            self.params = {"mu": mu, "alpha": alpha}
        else:
            self.kde = classic.CondKDE().fit(seqs)
            self.params = {"sigma2": self.kde.sigma2, "tau": self.kde.tau,
                           "global_mean": self.kde.global_mean.tolist(),
                           "global_var": self.kde.global_var}
        return self

    def loglik_terms(self, seq: EventSequence, est=None
                     ) -> Tuple[Optional[float], Optional[float]]:
        if self.kind == "poisson":
            return classic.poisson_loglik(seq, self.params["mu"]), None
        if self.kind == "hawkes":
            p = self.params
            return classic.hawkes_loglik(seq, p["mu"], p["alpha"], p["beta"]), None
        if self.kind == "self_correcting":
            p = self.params
            return classic.self_correcting_loglik(seq, p["mu"], p["alpha"]), None
        return None, self.kde.loglik(seq)

    def save(self, path: str, extra: Optional[dict] = None):
        payload = {"format": "stppflow-classical-v1", "kind": self.kind,
                   "params": self.params}
        payload.update(extra or {})
        with open(path, "w", encoding="utf-8") as fh:
            json.dump(payload, fh)

    def load(self, path: str) -> dict:
        with open(path, "r", encoding="utf-8") as fh:
            payload = json.load(fh)
        if payload.get("kind") != self.kind:
            raise ValueError(f"checkpoint is for {payload.get('kind')!r}, "
                             f"not {self.kind!r}")
        self.params = payload["params"]
        if self.kind == "kde":
            self.kde = classic.CondKDE(
                sigma2=self.params["sigma2"], tau=self.params["tau"],
                global_mean=np.asarray(self.params["global_mean"]),
                global_var=self.params["global_var"])
        return payload

    def fit_if_needed(self, seqs):
        if not self.params:
            self.fit(seqs)
        return self


def make_bundle(kind: str, dim: int = 2, seed: int = 0,
                solver: Optional[SolverConfig] = None):
    if kind in NEURAL_KINDS:
        return NeuralBundle(kind, dim, seed=seed, solver=solver)
    if kind in CLASSICAL_KINDS:
        return ClassicalBundle(kind)
    raise ValueError(f"unknown model {kind!r}; allowed: {sorted(ALL_KINDS)}")


# ---------------------------------------------------------------------------
# Loss


def loss(bundle: NeuralBundle, batch: Sequence[EventSequence], cfg: TrainConfig,
         est: Optional[TraceEstimator] = None) -> Tuple[Tensor, Dict[str, float]]:
    """Per-event negative joint log-likelihood plus the drift penalty."""
    est = est or cfg.estimator()
    total_events = sum(len(s) for s in batch)
    if total_events == 0:
        raise ValueError("batch has no events")
    ll_t = torch.zeros(())
    ll_s = torch.zeros(())
    penalty = torch.zeros(())
    for i, seq in enumerate(batch):
        try:
            lt, ls = bundle.loglik_terms(seq, est)
            if cfg.l2_drift > 0:
                penalty = penalty + bundle.latent.drift_penalty(bundle._last_path)
        except NonFiniteError as exc:
            raise NonFiniteError(f"sequence {i} in batch: {exc}") from exc
        ll_t = ll_t + lt
        ll_s = ll_s + ls
    penalty = penalty / len(batch)
    out = -(ll_t + ll_s) / total_events + cfg.l2_drift * penalty
    stats = {
        "temporal_nll": -float(ll_t.detach()) / total_events,
        "spatial_nll": -float(ll_s.detach()) / total_events,
        "joint_nll": -float((ll_t + ll_s).detach()) / total_events,
        "penalty": float(penalty.detach()),
        "events": total_events,
    }
    return assert_finite(out, "loss"), stats


# ---------------------------------------------------------------------------
# Optimizer state round-trip (for resumable checkpoints)


def _opt_state_to_json(opt: torch.optim.Optimizer) -> dict:
    sd = opt.state_dict()

    def conv(v):
        if isinstance(v, torch.Tensor):
            return {"__tensor__": True, "shape": list(v.shape),
                    "data": v.reshape(-1).tolist()}
        if isinstance(v, dict):
            return {k: conv(x) for k, x in v.items()}
        if isinstance(v, list):
            return [conv(x) for x in v]
        return v

    return conv(sd)


def _opt_state_from_json(obj):
    if isinstance(obj, dict):
        if obj.get("__tensor__"):
            return torch.tensor(obj["data"]).reshape(obj["shape"])
        out = {}
        for k, v in obj.items():
            try:
                k = int(k)
            except (TypeError, ValueError):
                pass
            out[k] = _opt_state_from_json(v)
        return out
    if isinstance(obj, list):
        return [_opt_state_from_json(v) for v in obj]
    return obj


# ---------------------------------------------------------------------------
# Fit / evaluate


def evaluate(bundle, ds, split: str = "",
             est: Optional[TraceEstimator] = None) -> EvalReport:
    """Per-event log-likelihood terms over a dataset split."""
    t0 = time.perf_counter()
    n_events = sum(len(s) for s in ds)
    sum_t, sum_s = 0.0, 0.0
    has_t = has_s = False
    # no torch.no_grad here: the exact divergence needs autograd internally;
    # detaching the scalars is enough to keep memory flat
    for seq in ds:
        lt, ls = bundle.loglik_terms(seq, est)
        if lt is not None:
            sum_t += float(lt.detach() if isinstance(lt, torch.Tensor) else lt)
            has_t = True
        if ls is not None:
            sum_s += float(ls.detach() if isinstance(ls, torch.Tensor) else ls)
            has_s = True
    kind = bundle.kind
    return EvalReport(
        model=kind, split=split, n_events=n_events,
        temporal_ll=sum_t / n_events if has_t else float("nan"),
        spatial_ll=sum_s / n_events if has_s else float("nan"),
        wall_clock=time.perf_counter() - t0)


def fit(bundle: NeuralBundle, train_ds, val_ds, cfg: TrainConfig,
        log_path: Optional[str] = None,
        checkpoint_path: Optional[str] = None,
        resume: bool = False) -> List[dict]:
    """Adam on the negative per-event joint log-likelihood.

    Early stopping on the validation joint NLL with the configured patience;
    the best-validation parameters are restored before returning.  The history
    rows mirror the CSV log: epoch, split, temporal/spatial/joint NLL.
    """
    params = bundle.store.tensors(trainable_only=True)
    opt = torch.optim.Adam(params, lr=cfg.lr)
    start_epoch = 0
    if resume and checkpoint_path:
        meta = bundle.load(checkpoint_path)
        start_epoch = int(meta.get("epoch", -1)) + 1
        opt_path = checkpoint_path + ".opt.json"
        try:
            with open(opt_path, "r", encoding="utf-8") as fh:
                opt.load_state_dict(_opt_state_from_json(json.load(fh)))
        except FileNotFoundError:
            pass

    shuffler = torch.Generator().manual_seed(cfg.seed)
    history: List[dict] = []
    best_val = float("inf")
    best_state = None
    stale = 0
    mode = "a" if (resume and start_epoch > 0) else "w"
    log_fh = open(log_path, mode, encoding="utf-8") if log_path else None
    if log_fh and log_fh.tell() == 0:
        log_fh.write("epoch,split,temporal_nll,spatial_nll,joint_nll\n")

    def log_row(epoch, split, t_nll, s_nll):
        row = {"epoch": epoch, "split": split, "temporal_nll": t_nll,
               "spatial_nll": s_nll, "joint_nll": t_nll + s_nll}
        history.append(row)
        if log_fh:
            log_fh.write(f"{epoch},{split},{t_nll:.10g},{s_nll:.10g},"
                         f"{t_nll + s_nll:.10g}\n")
            log_fh.flush()

    seqs = list(train_ds)
    try:
        for epoch in range(start_epoch, start_epoch + cfg.epochs):
            order = torch.randperm(len(seqs), generator=shuffler).tolist()
            ev_total = 0
            acc_t = acc_s = 0.0
            for lo in range(0, len(order), cfg.batch_size):
                batch = [seqs[i] for i in order[lo:lo + cfg.batch_size]]
                est = cfg.estimator(seed_offset=epoch * 7919 + lo)
                opt.zero_grad()
                value, stats = loss(bundle, batch, cfg, est)
                value.backward()
                if cfg.clip > 0:
                    torch.nn.utils.clip_grad_norm_(params, cfg.clip)
                opt.step()
                ev_total += stats["events"]
                acc_t += stats["temporal_nll"] * stats["events"]
                acc_s += stats["spatial_nll"] * stats["events"]
            log_row(epoch, "train", acc_t / ev_total, acc_s / ev_total)

            if val_ds is not None and len(val_ds):
                rep = evaluate(bundle, val_ds, "val", cfg.estimator(seed_offset=-1))
                log_row(epoch, "val", -rep.temporal_ll, -rep.spatial_ll)
                val_nll = -(rep.temporal_ll + rep.spatial_ll)
                if val_nll < best_val - 1e-12:
                    best_val = val_nll
                    best_state = bundle.store.state_dict()
                    stale = 0
                else:
                    stale += 1
                if checkpoint_path and (epoch + 1) % cfg.checkpoint_every == 0 \
                        and best_state is not None and stale == 0:
                    save_checkpoint(checkpoint_path, bundle.store,
                                    {"kind": bundle.kind, "epoch": epoch,
                                     "val_joint_nll": best_val})
                    with open(checkpoint_path + ".opt.json", "w",
                              encoding="utf-8") as fh:
                        json.dump(_opt_state_to_json(opt), fh)
                if stale > cfg.patience:
                    break
            elif checkpoint_path and (epoch + 1) % cfg.checkpoint_every == 0:
                save_checkpoint(checkpoint_path, bundle.store,
                                {"kind": bundle.kind, "epoch": epoch})
                with open(checkpoint_path + ".opt.json", "w",
                          encoding="utf-8") as fh:
                    json.dump(_opt_state_to_json(opt), fh)
    finally:
        if log_fh:
            log_fh.close()
    if best_state is not None:
        bundle.store.load_state_dict(best_state)
    return history
