"""Command-line interface: generate data, train, evaluate, export densities,
and sample sequences.

Configuration is a flat key=value text file; every key can be overridden with
a ``--key value`` flag.  Unknown keys are rejected.  The effective config is
echoed into the run directory so a run can be reproduced from its artifacts.

Exit codes: 0 success, 1 runtime failure, 2 configuration error.
"""

from __future__ import annotations

import argparse
import json
import math
import os
import sys
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
import torch

from . import data as data_mod
from . import train as train_mod
from .latent import EventSequence
from .nets import read_checkpoint_meta
from .odeint import SolverConfig
from .spatial import TraceEstimator
from .train import (ALL_KINDS, CLASSICAL_KINDS, NEURAL_KINDS, ClassicalBundle,
                    NeuralBundle, TrainConfig, make_bundle)


class ConfigError(ValueError):
    pass


class MajorantViolation(RuntimeError):
    """Thinning observed an intensity above the current majorant."""


# ---------------------------------------------------------------------------
# Flat key=value config


GEN_DEFAULTS = {
    "preset": "pinwheel",
    "n_clusters": 10,
    "mu": 0.05,
    "alpha_next": 0.5,
    "beta": 1.0,
    "T": 50.0,
    "radial_mean": 2.0,
    "radial_std": 0.3,
    "tangential_std": 0.1,
    "spiral_rate": 0.25,
    "n_train": 200,
    "n_val": 50,
    "n_test": 50,
    "seed": 0,
    "threads": 0,
    "out": "",
}

TRAIN_DEFAULTS = {
    "model": "tv_cnf",
    "data": "",
    "standardize": 1,
    "lr": 1e-3,
    "batch_size": 10,
    "epochs": 30,
    "l2_drift": 1e-4,
    "clip": 10.0,
    "patience": 10,
    "trace": "exact",
    "hidden_dim": 32,
    "rtol": 1e-4,
    "atol": 1e-4,
    "resume": 0,
    "seed": 0,
    "threads": 0,
    "out": "",
}

EVAL_DEFAULTS = {
    "model": "tv_cnf",
    "data": "",
    "split": "test",
    "checkpoint": "",
    "standardize": 1,
    "trace": "exact",
    "hidden_dim": 32,
    "rtol": 1e-4,
    "atol": 1e-4,
    "seed": 0,
    "threads": 0,
    "out": "",
}

DENSITY_DEFAULTS = {
    "model": "tv_cnf",
    "data": "",
    "checkpoint": "",
    "standardize": 1,
    "seq_index": 0,
    "times": "",          # comma-separated query times; empty = midpoint of T
    "n_events": -1,       # history prefix length; -1 = all events before t
    "grid_lo": -4.0,
    "grid_hi": 4.0,
    "grid_n": 100,
    "hidden_dim": 32,
    "rtol": 1e-4,
    "atol": 1e-4,
    "seed": 0,
    "threads": 0,
    "out": "",
}

SAMPLE_DEFAULTS = {
    "model": "tv_cnf",
    "checkpoint": "",
    "data": "",           # training data, for standardization stats
    "standardize": 1,
    "n": 10,
    "T": 50.0,
    "lookahead": 2.0,
    "majorant_factor": 1.5,
    "max_events": 2000,
    "hidden_dim": 32,
    "rtol": 1e-4,
    "atol": 1e-4,
    "seed": 0,
    "threads": 0,
    "out": "",
}

DEFAULTS = {"gen": GEN_DEFAULTS, "train": TRAIN_DEFAULTS, "eval": EVAL_DEFAULTS,
            "density": DENSITY_DEFAULTS, "sample": SAMPLE_DEFAULTS}


def _coerce(key: str, raw: str, defaults: dict):
    ref = defaults[key]
    if isinstance(ref, bool):
        return raw.lower() in ("1", "true", "yes")
    if isinstance(ref, int):
        return int(raw)
    if isinstance(ref, float):
        return float(raw)
    return raw


def load_config(cmd: str, path: Optional[str], overrides: Dict[str, str]) -> dict:
    defaults = DEFAULTS[cmd]
    cfg = dict(defaults)
    if path:
        with open(path, "r", encoding="utf-8") as fh:
            for lineno, line in enumerate(fh, 1):
                line = line.split("#", 1)[0].strip()
                if not line:
                    continue
                if "=" not in line:
                    raise ConfigError(f"{path}:{lineno}: expected key = value")
                key, _, raw = line.partition("=")
                key, raw = key.strip(), raw.strip()
                if key not in defaults:
                    raise ConfigError(f"{path}:{lineno}: unknown key {key!r}")
                cfg[key] = _coerce(key, raw, defaults)
    for key, raw in overrides.items():
        if key not in defaults:
            raise ConfigError(f"unknown option --{key}; known: {sorted(defaults)}")
        cfg[key] = _coerce(key, raw, defaults)
    return cfg


def echo_config(cfg: dict, out_dir: str, name: str = "config.txt"):
    os.makedirs(out_dir, exist_ok=True)
    with open(os.path.join(out_dir, name), "w", encoding="utf-8") as fh:
        for key in sorted(cfg):
            fh.write(f"{key} = {cfg[key]}\n")


def resolve_out(cfg: dict, cmd: str) -> str:
    out = cfg.get("out") or ""
    if not out:
        root = os.environ.get("STPP_RUN_DIR", "runs")
        out = os.path.join(root, cmd)
    os.makedirs(out, exist_ok=True)
    return out


def apply_runtime(cfg: dict):
    threads = int(cfg.get("threads", 0))
    if threads > 0:
        torch.set_num_threads(threads)


def _fmt(x: float) -> str:
    return f"{x:.17g}"


# ---------------------------------------------------------------------------
# Shared helpers


def _solver(cfg) -> SolverConfig:
    return SolverConfig(rtol=cfg["rtol"], atol=cfg["atol"])


def _load_splits(data_dir: str, wanted: Sequence[str]):
    out = {}
    for split in wanted:
        path = os.path.join(data_dir, f"{split}.jsonl")
        if not os.path.exists(path):
            raise ConfigError(f"missing {path}")
        out[split] = data_mod.load_jsonl(path, split=split)
    return out


def _standardized(cfg, wanted: Sequence[str]):
    """Load splits; return (splits dict, stats or None) with train-fitted
    standardization applied when enabled."""
    if not cfg["data"]:
        raise ConfigError("data directory is required (--data)")
    need = set(wanted) | {"train"} if cfg["standardize"] else set(wanted)
    splits = _load_splits(cfg["data"], sorted(need))
    stats = None
    if cfg["standardize"]:
        stats = data_mod.compute_stats(splits["train"])
        splits = {k: data_mod.standardize(v, stats) for k, v in splits.items()}
    return splits, stats


def _restore_bundle(cfg, dim: int):
    kind = cfg["model"]
    if kind not in ALL_KINDS:
        raise ConfigError(f"unknown model {kind!r}; allowed: {sorted(ALL_KINDS)}")
    if kind in NEURAL_KINDS:
        bundle = NeuralBundle(kind, dim=dim, seed=cfg["seed"],
                              hidden_dim=cfg.get("hidden_dim", 32),
                              solver=_solver(cfg))
    else:
        bundle = ClassicalBundle(kind)
    if cfg["checkpoint"]:
        bundle.load(cfg["checkpoint"])
    return bundle


# ---------------------------------------------------------------------------
# Commands


def cmd_gen(cfg: dict) -> int:
    apply_runtime(cfg)
    if cfg["preset"] != "pinwheel":
        raise ConfigError(f"unknown preset {cfg['preset']!r}; allowed: pinwheel")
    out = resolve_out(cfg, "gen")
    echo_config(cfg, out)
    spec = data_mod.PinwheelSpec(
        n_clusters=cfg["n_clusters"], mu=cfg["mu"], alpha_next=cfg["alpha_next"],
        beta=cfg["beta"], T=cfg["T"], radial_mean=cfg["radial_mean"],
        radial_std=cfg["radial_std"], tangential_std=cfg["tangential_std"],
        spiral_rate=cfg["spiral_rate"], n_train=cfg["n_train"],
        n_val=cfg["n_val"], n_test=cfg["n_test"], seed=cfg["seed"])
    splits = data_mod.split_pinwheel(spec)
    data_mod.assert_disjoint(splits)
    manifest = {"preset": "pinwheel", "seed": cfg["seed"], "files": {}}
    for name, ds in splits.items():
        path = os.path.join(out, f"{name}.jsonl")
        data_mod.save_jsonl(ds, path)
        lens = [len(s) for s in ds]
        manifest["files"][name] = {
            "path": os.path.basename(path), "sequences": len(ds),
            "events": int(sum(lens)), "min_len": int(min(lens)),
            "max_len": int(max(lens)),
        }
    with open(os.path.join(out, "manifest.json"), "w", encoding="utf-8") as fh:
        json.dump(manifest, fh, indent=2)
    print(f"wrote pinwheel splits to {out}")
    return 0


def cmd_train(cfg: dict) -> int:
    apply_runtime(cfg)
    out = resolve_out(cfg, "train")
    echo_config(cfg, out)
    kind = cfg["model"]
    if kind not in ALL_KINDS:
        raise ConfigError(f"unknown model {kind!r}; allowed: {sorted(ALL_KINDS)}")
    splits, stats = _standardized(cfg, ["train", "val"])
    ckpt = os.path.join(out, "model.ckpt")
    if kind in CLASSICAL_KINDS:
        bundle = ClassicalBundle(kind).fit(list(splits["train"]))
        bundle.save(ckpt)
        rep = train_mod.evaluate(bundle, splits["val"], "val")
        print(f"{kind}: fitted; val temporal_ll={rep.temporal_ll:.6g} "
              f"spatial_ll={rep.spatial_ll:.6g}")
        return 0
    bundle = NeuralBundle(kind, dim=splits["train"].dim, seed=cfg["seed"],
                          hidden_dim=cfg["hidden_dim"], solver=_solver(cfg))
    tcfg = TrainConfig(lr=cfg["lr"], batch_size=cfg["batch_size"],
                       epochs=cfg["epochs"], l2_drift=cfg["l2_drift"],
                       clip=cfg["clip"], patience=cfg["patience"],
                       seed=cfg["seed"], trace=cfg["trace"])
    history = train_mod.fit(bundle, splits["train"], splits["val"], tcfg,
                            log_path=os.path.join(out, "log.csv"),
                            checkpoint_path=ckpt, resume=bool(cfg["resume"]))
    bundle.save(ckpt + ".final", {"kind": kind, "epoch": len(history)})
    last = history[-1]
    print(f"{kind}: trained {last['epoch'] + 1} epochs; "
          f"last {last['split']} joint_nll={last['joint_nll']:.6g}")
    return 0


def cmd_eval(cfg: dict) -> int:
    apply_runtime(cfg)
    out = resolve_out(cfg, "eval")
    echo_config(cfg, out)
    splits, stats = _standardized(cfg, [cfg["split"]])
    ds = splits[cfg["split"]]
    bundle = _restore_bundle(cfg, ds.dim)
    if isinstance(bundle, ClassicalBundle):
        bundle.fit_if_needed(list(splits.get("train", ds)))
    est = TraceEstimator(mode=cfg["trace"], seed=cfg["seed"])
    rep = train_mod.evaluate(bundle, ds, cfg["split"], est)
    csv_path = os.path.join(out, "report.csv")
    with open(csv_path, "w", encoding="utf-8") as fh:
        fh.write("model,temporal_ll,spatial_ll\n")
        fh.write(f"{rep.model},{_fmt(rep.temporal_ll)},{_fmt(rep.spatial_ll)}\n")
    with open(os.path.join(out, "report.txt"), "w", encoding="utf-8") as fh:
        fh.write(f"model:        {rep.model}\n"
                 f"split:        {rep.split} ({len(ds)} sequences, "
                 f"{rep.n_events} events)\n"
                 f"temporal LL/event: {rep.temporal_ll:.6f}\n"
                 f"spatial LL/event:  {rep.spatial_ll:.6f}\n"
                 f"joint LL/event:    {rep.joint_ll:.6f}\n")
    print(open(csv_path, encoding="utf-8").read().strip())
    return 0


def _grid(cfg) -> Tuple[np.ndarray, torch.Tensor]:
    n = cfg["grid_n"]
    axis = np.linspace(cfg["grid_lo"], cfg["grid_hi"], n)
    xx, yy = np.meshgrid(axis, axis, indexing="ij")
    pts = np.stack([xx.ravel(), yy.ravel()], axis=1)
    return axis, torch.as_tensor(pts)


def grid_logprob(bundle: NeuralBundle, seq: EventSequence, t: float,
                 pts: torch.Tensor) -> torch.Tensor:
    """Conditional log-density at time t given the events of seq before t."""
    keep = [i for i in range(len(seq)) if float(seq.times[i]) < t]
    prefix = EventSequence(seq.times[keep] if keep else torch.zeros(0),
                           seq.marks[keep] if keep else torch.zeros(0, seq.dim),
                           max(t, float(seq.T)))
    cfg = bundle.solver
    if bundle.kind == "tv_cnf":
        return bundle.spatial.logprob_grid(t, pts, cfg)
    path = bundle.latent.evolve(prefix, cfg)
    if bundle.kind == "jump_cnf":
        return bundle.spatial.logprob_grid(t, pts, prefix, path, cfg)
    if bundle.kind == "attn_cnf":
        return bundle.spatial.logprob_grid(t, pts, prefix, path, cfg)
    h = path.h_at(t)
    return bundle.spatial.logprob(pts, h)


def cmd_density(cfg: dict) -> int:
    apply_runtime(cfg)
    out = resolve_out(cfg, "density")
    echo_config(cfg, out)
    if cfg["model"] not in NEURAL_KINDS:
        raise ConfigError("density export needs a neural model")
    splits, stats = _standardized(cfg, ["test"])
    ds = splits["test"]
    if ds.dim != 2:
        raise ConfigError("density grids require 2-D marks")
    seq = ds.sequences[cfg["seq_index"]]
    if cfg["n_events"] >= 0:
        k = cfg["n_events"]
        seq = EventSequence(seq.times[:k], seq.marks[:k], seq.T)
    bundle = _restore_bundle(cfg, 2)
    times = ([float(v) for v in cfg["times"].split(",") if v.strip()]
             if cfg["times"] else [0.5 * float(seq.T)])
    axis, pts = _grid(cfg)
    cell = (axis[1] - axis[0]) ** 2 if len(axis) > 1 else 1.0
    csv_path = os.path.join(out, "density.csv")
    warned = False
    with open(csv_path, "w", encoding="utf-8") as fh:
        fh.write("t,x1,x2,logp\n")
        for t in times:
            logp = grid_logprob(bundle, seq, t, pts).detach().numpy()
            integral = float(np.exp(logp).sum() * cell)
            if not (0.95 <= integral <= 1.05):
                warned = True
                print(f"warning: grid integral {integral:.4f} at t={t} "
                      f"outside [0.95, 1.05]; grid too coarse or too small",
                      file=sys.stderr)
            for p, lp in zip(pts.numpy(), logp):
                fh.write(f"{_fmt(t)},{_fmt(p[0])},{_fmt(p[1])},{_fmt(lp)}\n")
    print(f"wrote {csv_path}" + (" (integral warning)" if warned else ""))
    return 0


def _sample_sequence(bundle: NeuralBundle, T: float, gen: torch.Generator,
                     lookahead: float, factor: float, max_events: int,
                     log) -> EventSequence:
    """Ogata thinning with an adaptive majorant over a lookahead window."""
    cfg = bundle.solver
    dim = bundle.dim
    times: List[float] = []
    marks: List[torch.Tensor] = []
    t = 0.0

    def prefix_seq(horizon: float) -> EventSequence:
        if times:
            return EventSequence(torch.tensor(times), torch.stack(marks), horizon)
        return EventSequence(torch.zeros(0), torch.zeros(0, dim), horizon)

    while t < T:
        window_end = min(t + lookahead, T)
        probe_seq = prefix_seq(window_end + 1e-9)
        path = bundle.latent.evolve(probe_seq, cfg)
        probes = np.linspace(t, window_end, 16)
        lam = [float(bundle.latent.intensity(path.h_on_interval(
            len(path.intervals) - 1, float(u)))) for u in probes]
        majorant = factor * max(lam)
        accepted = False
        while t < window_end:
            w = float(torch.empty((), ).exponential_(majorant, generator=gen))
            t = t + w
            if t >= window_end:
                break
            lam_t = float(bundle.latent.intensity(
                path.h_on_interval(len(path.intervals) - 1, t)))
            if lam_t > majorant:
                log(f"majorant violated ({lam_t:.4g} > {majorant:.4g}); escalating")
                majorant = factor * lam_t
                continue
            if float(torch.rand((), generator=gen)) * majorant <= lam_t:
                accepted = True
                break
        if not accepted:
            t = window_end
            continue
        hist = prefix_seq(t)
        mark_path = bundle.latent.evolve(hist, cfg)
        if bundle.kind == "tv_cnf":
            x = bundle.spatial.sample(t, 1, gen, cfg)[0]
        elif bundle.kind == "jump_cnf":
            x = bundle.spatial.sample(t, 1, hist, mark_path, gen, cfg)[0]
        elif bundle.kind == "attn_cnf":
            x = bundle.spatial.sample(t, 1, hist, mark_path, gen, cfg)[0]
        else:
            x = bundle.spatial.sample(mark_path.h_at(t), 1, gen)[0]
        times.append(t)
        marks.append(x.detach())
        if len(times) > max_events:
            raise MajorantViolation(f"more than {max_events} sampled events")
    return prefix_seq(T)


def cmd_sample(cfg: dict) -> int:
    apply_runtime(cfg)
    out = resolve_out(cfg, "sample")
    echo_config(cfg, out)
    if cfg["model"] not in NEURAL_KINDS:
        raise ConfigError("sampling needs a neural model")
    stats = None
    if cfg["standardize"] and cfg["data"]:
        splits = _load_splits(cfg["data"], ["train"])
        stats = data_mod.compute_stats(splits["train"])
    bundle = _restore_bundle(cfg, 2)
    messages: List[str] = []
    seqs = []
    for i in range(cfg["n"]):
        gen = torch.Generator().manual_seed(cfg["seed"] + i)
        with torch.no_grad():
            seqs.append(_sample_sequence(
                bundle, cfg["T"], gen, cfg["lookahead"], cfg["majorant_factor"],
                cfg["max_events"], messages.append))
    ds = data_mod.Dataset(seqs)
    if stats is not None:
        ds = data_mod.Dataset(seqs, stats=stats)
        ds = data_mod.destandardize(ds)
    path = os.path.join(out, "samples.jsonl")
    data_mod.save_jsonl(ds, path)
    for msg in messages:
        print(msg, file=sys.stderr)
    print(f"wrote {len(seqs)} sequences to {path}")
    return 0


# ---------------------------------------------------------------------------
# Entry point


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="stppflow",
        description="Spatio-temporal point processes with exact-likelihood "
                    "continuous normalizing flow mark densities.")
    sub = parser.add_subparsers(dest="command", required=True)
    for cmd, defaults in DEFAULTS.items():
        p = sub.add_parser(cmd)
        p.add_argument("--config", default=None, help="key = value config file")
        for key, val in defaults.items():
            p.add_argument(f"--{key}", default=None, metavar=str(val))
    return parser


def main(argv: Optional[List[str]] = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return 2 if exc.code not in (0, None) else 0
    overrides = {k: v for k, v in vars(args).items()
                 if k not in ("command", "config") and v is not None}
    handlers = {"gen": cmd_gen, "train": cmd_train, "eval": cmd_eval,
                "density": cmd_density, "sample": cmd_sample}
    try:
        cfg = load_config(args.command, args.config, overrides)
        return handlers[args.command](cfg)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except FileNotFoundError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except Exception as exc:  # noqa: BLE001 - CLI boundary
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
