"""Reverse-mode gradient utilities and the named-parameter registry.

The reverse-mode engine itself is torch's (CPU, double precision); this module
pins down the surfaces the rest of the library relies on: named leaf
parameters, gradient extraction with explicit disconnected-parameter
reporting, detaching, and finite-value enforcement.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Dict, Iterable, List, Optional, Set

import torch

Tensor = torch.Tensor


class NonFiniteError(RuntimeError):
    """A value or gradient came out NaN/Inf."""


def assert_finite(x: Tensor, what: str = "value") -> Tensor:
    if not torch.isfinite(x).all():
        raise NonFiniteError(f"non-finite {what}")
    return x


def detach(x: Tensor) -> Tensor:
    """Treat ``x`` as a constant in the reverse pass; forward value unchanged."""
    return x.detach()


class ParameterStore:
    """Registry of named trainable leaves plus non-trainable buffers."""

    def __init__(self):
        self._params: Dict[str, Tensor] = {}
        self._trainable: Dict[str, bool] = {}

    def add(self, name: str, value, trainable: bool = True) -> Tensor:
        if name in self._params:
            raise KeyError(f"duplicate parameter name {name!r}")
        t = torch.as_tensor(value, dtype=torch.get_default_dtype()).clone()
        t.requires_grad_(trainable)
        self._params[name] = t
        self._trainable[name] = trainable
        return t

    def __getitem__(self, name: str) -> Tensor:
        return self._params[name]

    def __contains__(self, name: str) -> bool:
        return name in self._params

    def names(self) -> List[str]:
        return list(self._params)

    def items(self):
        return self._params.items()

    def tensors(self, trainable_only: bool = True) -> List[Tensor]:
        return [t for n, t in self._params.items()
                if self._trainable[n] or not trainable_only]

    def is_trainable(self, name: str) -> bool:
        return self._trainable[name]

    def state_dict(self) -> Dict[str, dict]:
        out = {}
        for name, t in self._params.items():
            out[name] = {
                "shape": list(t.shape),
                "data": t.detach().reshape(-1).tolist(),
                "trainable": self._trainable[name],
            }
        return out

    def load_state_dict(self, state: Dict[str, dict]):
        missing = set(self._params) - set(state)
        extra = set(state) - set(self._params)
        if missing or extra:
            raise KeyError(f"parameter mismatch: missing={sorted(missing)}, "
                           f"unexpected={sorted(extra)}")
        with torch.no_grad():
            for name, entry in state.items():
                t = self._params[name]
                v = torch.tensor(entry["data"]).reshape(entry["shape"])
                if list(t.shape) != list(v.shape):
                    raise ValueError(f"shape mismatch for {name!r}")
                t.copy_(v)


@dataclass
class GradResult:
    grads: Dict[str, Tensor]
    disconnected: Set[str] = field(default_factory=set)

    def __getitem__(self, name: str) -> Tensor:
        return self.grads[name]


def grad(output: Tensor, params, create_graph: bool = False,
         retain_graph: Optional[bool] = None) -> GradResult:
    """Gradient of a scalar ``output`` w.r.t. named parameters.

    ``params`` is a ParameterStore or a dict name -> tensor.  Parameters the
    output does not depend on get a zero gradient and are reported in
    ``disconnected``.  Raises NonFiniteError if any gradient is non-finite.
    """
    if output.numel() != 1:
        raise ValueError("output must be scalar")
    if isinstance(params, ParameterStore):
        named = [(n, t) for n, t in params.items() if params.is_trainable(n)]
    else:
        named = list(params.items())
    tensors = [t for _, t in named]
    gs = torch.autograd.grad(output, tensors, create_graph=create_graph,
                             retain_graph=retain_graph, allow_unused=True)
    result = GradResult({})
    for (name, t), g in zip(named, gs):
        if g is None:
            result.grads[name] = torch.zeros_like(t)
            result.disconnected.add(name)
        else:
            assert_finite(g, f"gradient of {name!r}")
            result.grads[name] = g
    return result
