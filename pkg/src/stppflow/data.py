"""Synthetic pinwheel data, JSONL serialization, splits, standardization.

The pinwheel dataset couples a 10-dimensional multivariate Hawkes process
(each dimension excites the next one, cyclically) with a spiral-arm spatial
cluster per dimension, so event locations rotate clockwise through the arms
as the temporal process cascades.
"""

from __future__ import annotations

import hashlib
import json
import math
from dataclasses import dataclass, field, replace
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from .classic import ExplosionGuard, HawkesParams, hawkes_sample
from .latent import EventSequence


class ParseError(ValueError):
    """Malformed JSONL line; message carries the 1-based line number."""


class OrderViolation(ParseError):
    pass


class DimMismatch(ParseError):
    pass


class DegenerateDim(ValueError):
    """A spatial dimension has (near) zero variance on the training split."""


# ---------------------------------------------------------------------------
# Dataset container


@dataclass
class StandardizeStats:
    mean: np.ndarray  # (d,)
    std: np.ndarray   # (d,)

    @property
    def log_jacobian(self) -> float:
        """Per-event log-density shift when mapping raw -> standardized."""
        return float(np.sum(np.log(self.std)))


@dataclass
class Dataset:
    sequences: List[EventSequence]
    split: str = ""
    stats: Optional[StandardizeStats] = None

    def __len__(self):
        return len(self.sequences)

    def __iter__(self):
        return iter(self.sequences)

    @property
    def dim(self) -> int:
        return self.sequences[0].dim

    def marks_matrix(self) -> np.ndarray:
        arrs = [np.asarray(s.marks) for s in self.sequences if len(s)]
        return np.concatenate(arrs, axis=0) if arrs else np.zeros((0, 1))

    def fingerprints(self) -> List[str]:
        out = []
        for s in self.sequences:
            h = hashlib.sha256()
            h.update(np.asarray(s.times).tobytes())
            h.update(np.asarray(s.marks).tobytes())
            h.update(repr(float(s.T)).encode())
            out.append(h.hexdigest())
        return out


# ---------------------------------------------------------------------------
# Pinwheel generation


@dataclass
class PinwheelSpec:
    """Parameters for the synthetic pinwheel point process.

    Temporal side: K-dimensional Hawkes with base rate ``mu`` per dimension
    and excitation ``alpha_next`` from dimension k to (k+1) mod K.  Spatial
    side: each dimension owns a spiral arm; points sit at radius
    N(radial_mean, radial_std^2), rotated by spiral_rate radians per unit
    radius, with tangential jitter.
    """

    n_clusters: int = 10
    mu: float = 0.05
    alpha_next: float = 0.5
    beta: float = 1.0
    T: float = 50.0
    radial_mean: float = 2.0
    radial_std: float = 0.3
    tangential_std: float = 0.1
    spiral_rate: float = 0.25
    length_band: Tuple[int, int] = (4, 108)
    n_train: int = 200
    n_val: int = 50
    n_test: int = 50
    seed: int = 0
    max_events: int = 2000

    def hawkes_params(self) -> HawkesParams:
        K = self.n_clusters
        alpha = np.zeros((K, K))
        for k in range(K):
            alpha[k, (k + 1) % K] = self.alpha_next
        return HawkesParams(np.full(K, self.mu), alpha, self.beta)


def pinwheel_marks(dims: np.ndarray, spec: PinwheelSpec,
                   rng: np.random.Generator) -> np.ndarray:
    """Sample one 2-D location per event from the arm of its Hawkes dimension."""
    n = len(dims)
    r = spec.radial_mean + spec.radial_std * rng.standard_normal(n)
    tang = spec.tangential_std * rng.standard_normal(n)
    theta = 2.0 * math.pi * dims / spec.n_clusters + spec.spiral_rate * r
    x = np.stack([r * np.cos(theta) - tang * np.sin(theta),
                  r * np.sin(theta) + tang * np.cos(theta)], axis=1)
    return x


def _gen_sequence(spec: PinwheelSpec, index: int) -> Tuple[EventSequence, np.ndarray]:
    params = spec.hawkes_params()
    seed = spec.seed + index
    for attempt in range(50):
        times, dims = hawkes_sample(params, spec.T, seed=seed + 1_000_003 * attempt,
                                    max_events=spec.max_events)
        if len(times):
            break
    else:
        raise ExplosionGuard(f"could not draw a non-empty sequence for index {index}")
    rng = np.random.default_rng([spec.seed, index, 7])
    marks = pinwheel_marks(dims, spec, rng)
    return EventSequence(times, marks, spec.T), dims


def gen_pinwheel(spec: PinwheelSpec) -> Dataset:
    """All train+val+test sequences in one untagged dataset, index-seeded."""
    total = spec.n_train + spec.n_val + spec.n_test
    seqs = [_gen_sequence(spec, i)[0] for i in range(total)]
    return Dataset(seqs)


def split_pinwheel(spec: PinwheelSpec) -> Dict[str, Dataset]:
    ds = gen_pinwheel(spec)
    a, b = spec.n_train, spec.n_train + spec.n_val
    return {
        "train": Dataset(ds.sequences[:a], split="train"),
        "val": Dataset(ds.sequences[a:b], split="val"),
        "test": Dataset(ds.sequences[b:], split="test"),
    }


# ---------------------------------------------------------------------------
# JSONL IO


def _fmt(x: float) -> float:
    # round-trip exact: %.17g preserves every double
    return float(f"{x:.17g}")


def save_jsonl(ds: Dataset, path: str) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for s in ds.sequences:
            obj = {
                "T": _fmt(float(s.T)),
                "events": [
                    {"t": _fmt(float(t)), "x": [_fmt(float(v)) for v in x]}
                    for t, x in zip(s.times, s.marks)
                ],
            }
            fh.write(json.dumps(obj) + "\n")


def load_jsonl(path: str, split: str = "") -> Dataset:
    seqs: List[EventSequence] = []
    dim: Optional[int] = None
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                obj = json.loads(line)
                T = float(obj["T"])
                events = obj["events"]
                times = [float(e["t"]) for e in events]
                marks = [[float(v) for v in e["x"]] for e in events]
            except (KeyError, TypeError, ValueError, json.JSONDecodeError) as exc:
                raise ParseError(f"line {lineno}: {exc}") from exc
            for j in range(1, len(times)):
                if times[j] <= times[j - 1]:
                    raise OrderViolation(
                        f"line {lineno}: event times not strictly increasing")
            widths = {len(x) for x in marks}
            if len(widths) > 1:
                raise DimMismatch(f"line {lineno}: inconsistent mark dimension")
            if marks:
                w = widths.pop()
                if dim is None:
                    dim = w
                elif w != dim:
                    raise DimMismatch(
                        f"line {lineno}: mark dimension {w} != {dim}")
            d = dim if dim is not None else 1
            arr = np.asarray(marks, dtype=float).reshape(len(times), d)
            try:
                seqs.append(EventSequence(np.asarray(times, dtype=float), arr, T))
            except ValueError as exc:
                raise ParseError(f"line {lineno}: {exc}") from exc
    return Dataset(seqs, split=split)


# ---------------------------------------------------------------------------
# Standardization


def compute_stats(train: Dataset, eps: float = 1e-10) -> StandardizeStats:
    marks = train.marks_matrix()
    if marks.shape[0] == 0:
        raise ValueError("training split has no events")
    mean = marks.mean(axis=0)
    std = marks.std(axis=0)
    if np.any(std < eps) or not np.all(np.isfinite(mean)) or not np.all(np.isfinite(std)):
        raise DegenerateDim("zero-variance or non-finite spatial dimension")
    return StandardizeStats(mean, std)


def standardize(ds: Dataset, stats: StandardizeStats) -> Dataset:
    seqs = []
    for s in ds.sequences:
        marks = (np.asarray(s.marks) - stats.mean) / stats.std
        seqs.append(EventSequence(np.asarray(s.times), marks, s.T))
    return Dataset(seqs, split=ds.split, stats=stats)


def destandardize(ds: Dataset) -> Dataset:
    if ds.stats is None:
        raise ValueError("dataset carries no standardization stats")
    st = ds.stats
    seqs = []
    for s in ds.sequences:
        marks = np.asarray(s.marks) * st.std + st.mean
        seqs.append(EventSequence(np.asarray(s.times), marks, s.T))
    return Dataset(seqs, split=ds.split)


def standardize_logprob(logp_raw: float, stats: StandardizeStats) -> float:
    """Per-event density change of variables, raw units -> standardized."""
    return logp_raw + stats.log_jacobian


def destandardize_logprob(logp_std: float, stats: StandardizeStats) -> float:
    return logp_std - stats.log_jacobian


def assert_disjoint(splits: Dict[str, Dataset]) -> None:
    """Raise if any sequence (by content hash) appears in two splits."""
    seen: Dict[str, str] = {}
    for name, ds in splits.items():
        for fp in ds.fingerprints():
            if fp in seen and seen[fp] != name:
                raise ValueError(f"sequence shared between {seen[fp]} and {name}")
            seen[fp] = name
