"""Neural building blocks: MLPs with a time-gated Swish, a GRU jump cell,
radial flows with analytic log-determinants, and causal multihead attention
in a residual branch with activation normalization.

Every block registers its weights in a :class:`~stppflow.diff.ParameterStore`
under a dotted prefix, which is also the checkpoint naming scheme.
"""

from __future__ import annotations

import json
import math
from typing import Optional, Sequence, Tuple

import torch

from .diff import ParameterStore, assert_finite

Tensor = torch.Tensor
softplus = torch.nn.functional.softplus


class ShapeMismatch(ValueError):
    pass


class NonInvertibleParams(RuntimeError):
    pass


def _uniform(gen: torch.Generator, shape, bound: float) -> Tensor:
    return (torch.rand(shape, generator=gen) * 2 - 1) * bound


class Linear:
    def __init__(self, store: ParameterStore, name: str, din: int, dout: int,
                 gen: torch.Generator, zero_init: bool = False):
        bound = 1.0 / math.sqrt(din)
        w = torch.zeros(dout, din) if zero_init else _uniform(gen, (dout, din), bound)
        b = torch.zeros(dout) if zero_init else _uniform(gen, (dout,), bound)
        self.w = store.add(name + ".w", w)
        self.b = store.add(name + ".b", b)
        self.din, self.dout = din, dout

    def __call__(self, x: Tensor) -> Tensor:
        if x.shape[-1] != self.din:
            raise ShapeMismatch(f"expected last dim {self.din}, got {x.shape[-1]}")
        return x @ self.w.T + self.b


class TimeDependentSwish:
    """z * sigmoid(beta(t) * z), with beta an MLP of widths [1, 64, dim]."""

    def __init__(self, store: ParameterStore, name: str, dim: int, gen: torch.Generator):
        self.l1 = Linear(store, name + ".beta.0", 1, 64, gen)
        self.l2 = Linear(store, name + ".beta.1", 64, dim, gen)

    def beta(self, t: Tensor) -> Tensor:
        return self.l2(softplus(self.l1(t)))

    def __call__(self, t: Tensor, z: Tensor) -> Tensor:
        return z * torch.sigmoid(self.beta(t) * z)


def _time_column(t, ref: Tensor) -> Tensor:
    """Turn ``t`` (float, or a per-row vector aligned with ref's dim -2) into
    a trailing-1 column that broadcasts against ``ref``."""
    if not isinstance(t, Tensor):
        t = torch.tensor(float(t))
    if t.dim() == 0:
        t = t.reshape(1)
    return t.unsqueeze(-1)


class TimeMLP:
    """Fully connected net; hidden activations are softplus or the
    time-gated Swish.  ``zero_init_last`` makes the output identically zero
    at initialization."""

    def __init__(self, store: ParameterStore, name: str, widths: Sequence[int],
                 gen: torch.Generator, activation: str = "tdswish",
                 zero_init_last: bool = True):
        if len(widths) < 2:
            raise ValueError("need at least input and output widths")
        if activation not in ("softplus", "tdswish"):
            raise ValueError(f"unknown activation {activation!r}")
        self.widths = list(widths)
        self.activation = activation
        self.layers = []
        self.acts = []
        for i in range(len(widths) - 1):
            last = i == len(widths) - 2
            self.layers.append(Linear(store, f"{name}.{i}", widths[i], widths[i + 1],
                                      gen, zero_init=zero_init_last and last))
            if not last and activation == "tdswish":
                self.acts.append(TimeDependentSwish(store, f"{name}.act{i}",
                                                    widths[i + 1], gen))

    def __call__(self, t, z: Tensor) -> Tensor:
        tc = _time_column(t, z) if self.activation == "tdswish" else None
        for i, layer in enumerate(self.layers):
            z = layer(z)
            if i < len(self.layers) - 1:
                z = self.acts[i](tc, z) if self.activation == "tdswish" else softplus(z)
        return z


class Mlp(TimeMLP):
    """Plain softplus MLP (no time input)."""

    def __init__(self, store, name, widths, gen, zero_init_last=False):
        super().__init__(store, name, widths, gen, activation="softplus",
                         zero_init_last=zero_init_last)

    def __call__(self, z: Tensor) -> Tensor:
        return super().__call__(0.0, z)


class GRUCell:
    """Standard GRU update; the update gate blends old state and candidate
    (gate saturated at 1 keeps the old state)."""

    def __init__(self, store: ParameterStore, name: str, input_dim: int,
                 hidden_dim: int, gen: torch.Generator):
        self.input_dim, self.hidden_dim = input_dim, hidden_dim
        self.zx = Linear(store, name + ".zx", input_dim, hidden_dim, gen)
        self.zh = Linear(store, name + ".zh", hidden_dim, hidden_dim, gen)
        self.rx = Linear(store, name + ".rx", input_dim, hidden_dim, gen)
        self.rh = Linear(store, name + ".rh", hidden_dim, hidden_dim, gen)
        self.cx = Linear(store, name + ".cx", input_dim, hidden_dim, gen)
        self.ch = Linear(store, name + ".ch", hidden_dim, hidden_dim, gen)

    def __call__(self, h: Tensor, x: Tensor) -> Tensor:
        if h.shape[-1] != self.hidden_dim or x.shape[-1] != self.input_dim:
            raise ShapeMismatch("GRU input/hidden dims inconsistent")
        z = torch.sigmoid(self.zx(x) + self.zh(h))
        r = torch.sigmoid(self.rx(x) + self.rh(h))
        c = torch.tanh(self.cx(x) + self.ch(r * h))
        return z * h + (1 - z) * c


# ---------------------------------------------------------------------------
# Radial flows


def radial_flow_forward(x: Tensor, c: Tensor, alpha_raw: Tensor,
                        beta_raw: Tensor) -> Tuple[Tensor, Tensor]:
    """y = x + beta/(alpha + r) * (x - c), r = |x - c|; returns (y, logdet).

    alpha = softplus(alpha_raw) > 0 and beta = -alpha + softplus(beta_raw)
    >= -alpha, which keeps the map invertible.  Raw parameters of zero give
    beta = 0, i.e. the identity with zero log-determinant.
    """
    d = x.shape[-1]
    alpha = softplus(alpha_raw)
    beta = -alpha + softplus(beta_raw)
    diff = x - c
    r = diff.norm(dim=-1, keepdim=True)
    h = 1.0 / (alpha + r)
    y = x + beta * h * diff
    bh = beta * h
    inner = 1.0 + bh - beta * r * h * h  # d/dr [r (1 + beta h)]
    if float((1.0 + bh).detach().min()) <= 0.0 or float(inner.detach().min()) <= 0.0:
        raise NonInvertibleParams("radial layer lost invertibility")
    logdet = (d - 1) * torch.log1p(bh.squeeze(-1)) + torch.log(inner.squeeze(-1))
    return y, logdet


def radial_flow_inverse(y: Tensor, c: Tensor, alpha_raw: Tensor,
                        beta_raw: Tensor, tol: float = 1e-12) -> Tensor:
    """Numerical inverse via bisection on the radius (monotone in r)."""
    alpha = softplus(alpha_raw)
    beta = -alpha + softplus(beta_raw)
    diff = y - c
    ry = diff.norm(dim=-1, keepdim=True)
    lo = torch.zeros_like(ry)
    hi = ry + alpha.abs() + beta.abs() + 1.0
    for _ in range(200):
        mid = (lo + hi) / 2
        val = mid * (1 + beta / (alpha + mid))
        high = val > ry
        hi = torch.where(high, mid, hi)
        lo = torch.where(high, lo, mid)
        if float((hi - lo).max()) < tol:
            break
    r = (lo + hi) / 2
    scale = torch.where(ry > 0, r / ry.clamp_min(1e-300), torch.zeros_like(ry))
    return c + diff * scale


class RadialFlowStack:
    """Composition of radial flow layers whose parameters arrive as one flat
    vector (hypernetwork output).  Layout per layer: [c (d), alpha_raw,
    beta_raw]."""

    def __init__(self, dim: int, n_layers: int = 4):
        self.dim = dim
        self.n_layers = n_layers

    @property
    def param_size(self) -> int:
        return self.n_layers * (self.dim + 2)

    def _split(self, raw: Tensor, k: int):
        base = k * (self.dim + 2)
        c = raw[..., base:base + self.dim]
        a = raw[..., base + self.dim:base + self.dim + 1]
        b = raw[..., base + self.dim + 1:base + self.dim + 2]
        return c, a, b

    def forward(self, x: Tensor, raw: Tensor) -> Tuple[Tensor, Tensor]:
        if raw.shape[-1] != self.param_size:
            raise ShapeMismatch(f"expected {self.param_size} raw params")
        logdet = torch.zeros(x.shape[:-1])
        for k in range(self.n_layers):
            c, a, b = self._split(raw, k)
            x, ld = radial_flow_forward(x, c, a, b)
            logdet = logdet + ld
        return x, logdet

    def inverse(self, y: Tensor, raw: Tensor) -> Tensor:
        for k in reversed(range(self.n_layers)):
            c, a, b = self._split(raw, k)
            y = radial_flow_inverse(y, c, a, b)
        return y


# ---------------------------------------------------------------------------
# Attention


class ActNorm:
    """Per-channel scale and shift; data-initialized on first call to give the
    first batch zero mean and unit variance, trainable afterwards."""

    def __init__(self, store: ParameterStore, name: str, dim: int):
        self.log_scale = store.add(name + ".log_scale", torch.zeros(dim))
        self.shift = store.add(name + ".shift", torch.zeros(dim))
        self._init_flag = store.add(name + ".initialized", torch.zeros(1),
                                    trainable=False)

    @property
    def initialized(self) -> bool:
        return bool(self._init_flag.item() > 0.5)

    def __call__(self, x: Tensor) -> Tensor:
        if not self.initialized:
            with torch.no_grad():
                flat = x.detach().reshape(-1, x.shape[-1])
                if flat.shape[0] > 1:
                    std = flat.std(dim=0, unbiased=False).clamp_min(1e-8)
                    self.log_scale.copy_(-std.log())
                    self.shift.copy_(-flat.mean(dim=0) / std)
                self._init_flag.fill_(1.0)
        return x * self.log_scale.exp() + self.shift


class CausalSelfAttention:
    """Multihead attention over event index with a strict lower-triangular
    mask.  ``variant`` selects dot-product or L2 (negative squared distance)
    logits.  ``detach_cross`` severs all cross-event partial derivatives while
    leaving forward values and the diagonal (own-event) derivatives intact.
    """

    def __init__(self, store: ParameterStore, name: str, dim: int,
                 gen: torch.Generator, heads: int = 4, variant: str = "dot"):
        if dim % heads != 0:
            raise ValueError("dim must be divisible by heads")
        if variant not in ("dot", "l2"):
            raise ValueError(f"unknown attention variant {variant!r}")
        self.dim, self.heads, self.dh = dim, heads, dim // heads
        self.variant = variant
        self.wq = Linear(store, name + ".wq", dim, dim, gen)
        self.wk = Linear(store, name + ".wk", dim, dim, gen)
        self.wv = Linear(store, name + ".wv", dim, dim, gen)
        self.wo = Linear(store, name + ".wo", dim, dim, gen)

    def _heads(self, x: Tensor) -> Tensor:
        # (..., n, dim) -> (..., heads, n, dh)
        return x.reshape(*x.shape[:-1], self.heads, self.dh).transpose(-3, -2)

    def _logits(self, q: Tensor, k: Tensor) -> Tensor:
        if self.variant == "dot":
            return q @ k.transpose(-1, -2) / math.sqrt(self.dh)
        # L2 attention: -|q_i - k_j|^2 / sqrt(dh)
        q2 = (q * q).sum(-1, keepdim=True)
        k2 = (k * k).sum(-1, keepdim=True).transpose(-1, -2)
        return -(q2 + k2 - 2 * q @ k.transpose(-1, -2)) / math.sqrt(self.dh)

    def __call__(self, x: Tensor, detach_cross: bool = False,
                 return_weights: bool = False):
        n = x.shape[-2]
        q = self._heads(self.wq(x))
        k_live = self._heads(self.wk(x))
        v_live = self._heads(self.wv(x))
        if detach_cross:
            xd = x.detach()
            k = self._heads(self.wk(xd))
            v = self._heads(self.wv(xd))
        else:
            k, v = k_live, v_live
        logits = self._logits(q, k)
        if detach_cross:
            # own-event key stays live on the diagonal
            diag_live = self._logits(q.unsqueeze(-2),
                                     k_live.unsqueeze(-2)).squeeze(-1).squeeze(-1)
            eye = torch.eye(n, dtype=torch.bool).expand_as(logits)
            logits = torch.where(eye, diag_live.unsqueeze(-1).expand_as(logits), logits)
        mask = torch.triu(torch.ones(n, n, dtype=torch.bool), diagonal=1)
        logits = logits.masked_fill(mask, float("-inf"))
        s = torch.softmax(logits, dim=-1)
        out = s @ v
        if detach_cross:
            s_diag = torch.diagonal(s, dim1=-2, dim2=-1).unsqueeze(-1)
            out = out + s_diag * (v_live - v)
        out = out.transpose(-3, -2).reshape(*x.shape[:-1], self.dim)
        out = self.wo(out)
        if return_weights:
            return out, s
        return out


class AttentionBlock:
    """Residual branch: x + MHA(ActNorm(x))."""

    def __init__(self, store: ParameterStore, name: str, dim: int,
                 gen: torch.Generator, heads: int = 4, variant: str = "dot"):
        self.norm = ActNorm(store, name + ".norm", dim)
        self.attn = CausalSelfAttention(store, name + ".mha", dim, gen,
                                        heads=heads, variant=variant)

    def __call__(self, x: Tensor, detach_cross: bool = False) -> Tensor:
        return x + self.attn(self.norm(x), detach_cross=detach_cross)


# ---------------------------------------------------------------------------
# Checkpoints

CHECKPOINT_FORMAT = "stppflow-checkpoint-v1"


def save_checkpoint(path, store: ParameterStore, meta: Optional[dict] = None):
    """Write parameters as JSON: name -> {shape, row-major data, trainable}."""
    payload = {
        "format": CHECKPOINT_FORMAT,
        "meta": meta or {},
        "params": store.state_dict(),
    }
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(payload, fh)


def load_checkpoint(path, store: ParameterStore) -> dict:
    """Load parameters into ``store``; returns the checkpoint metadata."""
    with open(path, "r", encoding="utf-8") as fh:
        payload = json.load(fh)
    if payload.get("format") != CHECKPOINT_FORMAT:
        raise ValueError(f"not a {CHECKPOINT_FORMAT} file: {path}")
    store.load_state_dict(payload["params"])
    return payload.get("meta", {})


def read_checkpoint_meta(path) -> dict:
    with open(path, "r", encoding="utf-8") as fh:
        payload = json.load(fh)
    if payload.get("format") != CHECKPOINT_FORMAT:
        raise ValueError(f"not a {CHECKPOINT_FORMAT} file: {path}")
    return payload.get("meta", {})
