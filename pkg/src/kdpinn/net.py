"""Fully-connected networks with plain and jet-augmented forward passes."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .jets import DTYPE, Jet2, get_activation, jet_activation, jet_affine, seed_inputs


@dataclass(frozen=True)
class LayerSpec:
    sizes: tuple[int, ...]
    activation: str = "tanh"
    output_activation: str = "identity"

    def __post_init__(self):
        object.__setattr__(self, "sizes", tuple(int(s) for s in self.sizes))
        if len(self.sizes) < 2 or any(s < 1 for s in self.sizes):
            raise ValueError(f"invalid layer sizes {self.sizes}")
        get_activation(self.activation)
        get_activation(self.output_activation)

    @property
    def d_in(self) -> int:
        return self.sizes[0]

    @property
    def d_out(self) -> int:
        return self.sizes[-1]

    def to_dict(self) -> dict:
        return {"sizes": list(self.sizes), "activation": self.activation,
                "output_activation": self.output_activation}

    @classmethod
    def from_dict(cls, d: dict) -> "LayerSpec":
        return cls(tuple(d["sizes"]), d.get("activation", "tanh"), d.get("output_activation", "identity"))


def hidden_spec(d_in: int, width: int, depth: int, d_out: int, activation: str = "tanh") -> LayerSpec:
    """``depth`` hidden layers of ``width`` units, e.g. (2, 64, 4, 1) -> [2,64,64,64,64,1]."""
    return LayerSpec((d_in,) + (width,) * depth + (d_out,), activation)


def param_count(spec: LayerSpec) -> int:
    s = spec.sizes
    return sum((a + 1) * b for a, b in zip(s[:-1], s[1:]))


def mac_count(spec: LayerSpec) -> int:
    """Multiply-accumulates per sample for one forward pass."""
    s = spec.sizes
    return sum(a * b for a, b in zip(s[:-1], s[1:]))


class MlpNetwork(nn.Module):
    """MLP whose inputs are affinely mapped from a physical box onto [-1, 1]^d.

    Derivatives returned by :meth:`forward_jets` are with respect to the raw
    (physical) coordinates.
    """

    def __init__(self, spec: LayerSpec, lo, hi):
        super().__init__()
        self.spec = spec
        lo = torch.as_tensor(lo, dtype=DTYPE).reshape(-1)
        hi = torch.as_tensor(hi, dtype=DTYPE).reshape(-1)
        if lo.numel() != spec.d_in or hi.numel() != spec.d_in:
            raise ValueError("input box dimension does not match the layer spec")
        if not bool(torch.all(hi > lo)):
            raise ValueError("input box must have positive widths")
        self.register_buffer("lo", lo)
        self.register_buffer("hi", hi)
        self.register_buffer("_gain", 2.0 / (hi - lo))
        s = spec.sizes
        self.weights = nn.ParameterList(
            [nn.Parameter(torch.zeros(b, a, dtype=DTYPE)) for a, b in zip(s[:-1], s[1:])]
        )
        self.biases = nn.ParameterList([nn.Parameter(torch.zeros(b, dtype=DTYPE)) for b in s[1:]])
        self._act = get_activation(spec.activation)
        self._out_act = get_activation(spec.output_activation)

    @property
    def n_params(self) -> int:
        return param_count(self.spec)

    def scale(self, x: torch.Tensor) -> torch.Tensor:
        return (x - self.lo) * self._gain - 1.0

    def unscale(self, z: torch.Tensor) -> torch.Tensor:
        return (z + 1.0) / self._gain + self.lo

    def forward(self, x) -> torch.Tensor:
        x = torch.as_tensor(x, dtype=DTYPE)
        if x.shape[-1] != self.spec.d_in:
            raise ValueError(f"expected {self.spec.d_in} input columns, got {x.shape[-1]}")
        return self.forward_scaled(self.scale(x))

    def forward_scaled(self, z: torch.Tensor) -> torch.Tensor:
        """Forward pass on inputs already mapped to [-1, 1]^d."""
        last = len(self.weights) - 1
        for k, (W, b) in enumerate(zip(self.weights, self.biases)):
            z = F.linear(z, W, b)
            z = self._out_act.value(z) if k == last else self._act.value(z)
        return z

    def forward_jets(self, x) -> list[Jet2]:
        """One jet per output channel, each with batch shape ``x.shape[:-1]``."""
        x = torch.as_tensor(x, dtype=DTYPE)
        if x.shape[-1] != self.spec.d_in:
            raise ValueError(f"expected {self.spec.d_in} input columns, got {x.shape[-1]}")
        z = (seed_inputs(x) - self.lo) * self._gain - 1.0
        last = len(self.weights) - 1
        for k, (W, b) in enumerate(zip(self.weights, self.biases)):
            z = jet_affine(W, b, z)
            z = jet_activation(self.spec.output_activation if k == last else self.spec.activation, z)
        return [z[..., c] for c in range(self.spec.d_out)]

    def flat_parameters(self) -> torch.Tensor:
        return torch.cat([p.detach().reshape(-1) for p in self.parameters()])

    @torch.no_grad()
    def set_flat_parameters(self, flat) -> None:
        flat = torch.as_tensor(flat, dtype=DTYPE)
        if flat.numel() != self.n_params:
            raise ValueError(f"expected {self.n_params} parameters, got {flat.numel()}")
        offset = 0
        for p in self.parameters():
            n = p.numel()
            p.copy_(flat[offset:offset + n].reshape(p.shape))
            offset += n

    def clone(self) -> "MlpNetwork":
        other = MlpNetwork(self.spec, self.lo, self.hi)
        other.set_flat_parameters(self.flat_parameters())
        return other


def init_xavier(spec: LayerSpec, seed: int, lo=None, hi=None) -> MlpNetwork:
    """Glorot-uniform weights, zero biases; identical for identical seeds."""
    if lo is None:
        lo = [-1.0] * spec.d_in
    if hi is None:
        hi = [1.0] * spec.d_in
    net = MlpNetwork(spec, lo, hi)
    rng = np.random.default_rng(seed)
    with torch.no_grad():
        for W in net.weights:
            fan_out, fan_in = W.shape
            bound = math.sqrt(6.0 / (fan_in + fan_out))
            W.copy_(torch.from_numpy(rng.uniform(-bound, bound, size=(fan_out, fan_in))))
    return net
