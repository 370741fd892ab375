"""Second-order forward jets: value, input gradient and input Hessian.

A :class:`Jet2` holds a batch of scalars together with their first and second
derivatives with respect to ``d`` input coordinates (``1 <= d <= 3``). The
derivative parts are stored channel-first so that an affine layer maps all of
them with a single matrix product:

* ``value``  -- shape ``B``
* ``dval``   -- shape ``(d, *B)``; ``dval[i]`` is the derivative along input ``i``
* ``d2val``  -- shape ``(P, *B)``; packed upper triangle of the Hessian,
  ``P = d(d+1)/2``, ordered as :func:`hessian_pairs`

Packed storage makes the Hessian symmetric by construction.
"""

from __future__ import annotations

from dataclasses import dataclass
from functools import lru_cache
from typing import Callable

import torch
import torch.nn.functional as F

from .errors import DivergenceError

DTYPE = torch.float64
MAX_DIM = 3


@lru_cache(maxsize=None)
def hessian_pairs(d: int) -> tuple[tuple[int, int], ...]:
    return tuple((i, j) for i in range(d) for j in range(i, d))


@lru_cache(maxsize=None)
def _pair_index(d: int) -> dict:
    idx = {}
    for k, (i, j) in enumerate(hessian_pairs(d)):
        idx[i, j] = k
        idx[j, i] = k
    return idx


def _check_dim(d: int) -> None:
    if not 1 <= d <= MAX_DIM:
        raise ValueError(f"input dimension must be in [1, {MAX_DIM}], got {d}")


class Jet2:
    __slots__ = ("value", "dval", "d2val")

    def __init__(self, value: torch.Tensor, dval: torch.Tensor, d2val: torch.Tensor):
        d = dval.shape[0]
        if dval.shape[1:] != value.shape or d2val.shape[1:] != value.shape:
            raise ValueError("jet parts have inconsistent batch shapes")
        if d2val.shape[0] != d * (d + 1) // 2:
            raise ValueError("packed Hessian has the wrong number of entries")
        self.value = value
        self.dval = dval
        self.d2val = d2val

    @property
    def dim(self) -> int:
        return self.dval.shape[0]

    @property
    def shape(self) -> torch.Size:
        return self.value.shape

    def d(self, i: int) -> torch.Tensor:
        return self.dval[i]

    def d2(self, i: int, j: int) -> torch.Tensor:
        return self.d2val[_pair_index(self.dim)[i, j]]

    def gradient(self) -> torch.Tensor:
        """Gradient with the coordinate axis last: shape ``(*B, d)``."""
        return torch.movedim(self.dval, 0, -1)

    def hessian(self) -> torch.Tensor:
        """Dense symmetric Hessian: shape ``(*B, d, d)``."""
        d = self.dim
        idx = _pair_index(d)
        rows = [torch.stack([self.d2val[idx[i, j]] for j in range(d)], dim=-1) for i in range(d)]
        return torch.stack(rows, dim=-2)

    def __getitem__(self, item) -> "Jet2":
        if not isinstance(item, tuple):
            item = (item,)
        lead = (slice(None),) + item
        return Jet2(self.value[item], self.dval[lead], self.d2val[lead])

    def detach(self) -> "Jet2":
        return Jet2(self.value.detach(), self.dval.detach(), self.d2val.detach())

    # arithmetic, used to compose residual operators and in tests

    def __add__(self, other):
        if isinstance(other, Jet2):
            return Jet2(self.value + other.value, self.dval + other.dval, self.d2val + other.d2val)
        return Jet2(self.value + other, self.dval, self.d2val)

    __radd__ = __add__

    def __neg__(self):
        return Jet2(-self.value, -self.dval, -self.d2val)

    def __sub__(self, other):
        return self + (-other)

    def __rsub__(self, other):
        return (-self) + other

    def __mul__(self, other):
        if isinstance(other, Jet2):
            pairs = hessian_pairs(self.dim)
            a, b = self.dval, other.dval
            cross = torch.stack([a[i] * b[j] + a[j] * b[i] for i, j in pairs])
            return Jet2(
                self.value * other.value,
                self.value * b + other.value * a,
                self.value * other.d2val + other.value * self.d2val + cross,
            )
        return Jet2(self.value * other, self.dval * other, self.d2val * other)

    __rmul__ = __mul__

    def __repr__(self):
        return f"Jet2(shape={tuple(self.shape)}, d={self.dim})"


def constant_jet(value: torch.Tensor, d: int) -> Jet2:
    value = torch.as_tensor(value, dtype=DTYPE)
    zeros = torch.zeros((d,) + value.shape, dtype=DTYPE)
    return Jet2(value, zeros, torch.zeros((d * (d + 1) // 2,) + value.shape, dtype=DTYPE))


def seed_inputs(x, d: int | None = None) -> Jet2:
    """Seed jets for the input coordinates.

    ``x`` has shape ``(..., d)``; the result is a jet vector of the same shape
    whose entry ``i`` carries value ``x_i``, gradient ``e_i`` and zero Hessian.
    """
    x = torch.as_tensor(x, dtype=DTYPE)
    if x.ndim == 0:
        x = x.reshape(1)
    if d is None:
        d = x.shape[-1]
    _check_dim(d)
    if x.shape[-1] != d:
        raise ValueError(f"expected {d} coordinates, got {x.shape[-1]}")
    eye = torch.eye(d, dtype=DTYPE)
    dval = eye.reshape((d,) + (1,) * (x.ndim - 1) + (d,)).expand((d,) + tuple(x.shape))
    d2val = torch.zeros((d * (d + 1) // 2,) + tuple(x.shape), dtype=DTYPE)
    return Jet2(x, dval, d2val)


def jet_affine(W: torch.Tensor, b: torch.Tensor | None, z: Jet2) -> Jet2:
    """``W z + b`` applied along the last axis of a jet vector."""
    if z.shape[-1] != W.shape[1]:
        raise ValueError(f"weight expects {W.shape[1]} inputs, jet vector has {z.shape[-1]}")
    if b is not None and b.shape != (W.shape[0],):
        raise ValueError("bias shape does not match weight rows")
    return Jet2(F.linear(z.value, W, b), F.linear(z.dval, W), F.linear(z.d2val, W))


@dataclass(frozen=True)
class Activation:
    name: str
    value: Callable[[torch.Tensor], torch.Tensor]
    # returns (sigma, sigma', sigma'') evaluated at the pre-activation
    derivs: Callable[[torch.Tensor], tuple[torch.Tensor, torch.Tensor, torch.Tensor]]


def _tanh_derivs(v):
    t = torch.tanh(v)
    s1 = 1.0 - t * t
    return t, s1, -2.0 * t * s1


def _silu_derivs(v):
    s = torch.sigmoid(v)
    s1 = s * (1.0 + v * (1.0 - s))
    s2 = s * (1.0 - s) * (2.0 + v * (1.0 - 2.0 * s))
    return F.silu(v), s1, s2


def _identity_derivs(v):
    return v, torch.ones_like(v), torch.zeros_like(v)


ACTIVATIONS = {
    "tanh": Activation("tanh", torch.tanh, _tanh_derivs),
    "silu": Activation("silu", F.silu, _silu_derivs),
    "identity": Activation("identity", lambda v: v, _identity_derivs),
}


def get_activation(kind: str) -> Activation:
    try:
        return ACTIVATIONS[kind]
    except KeyError:
        raise ValueError(f"unsupported activation {kind!r}; choose from {sorted(ACTIVATIONS)}") from None


def jet_activation(kind: str, z: Jet2) -> Jet2:
    if kind == "identity":
        return z
    act = get_activation(kind)
    sig, s1, s2 = act.derivs(z.value)
    g = z.dval.unbind(0)
    curv = torch.stack([s2 * g[i] * g[j] for i, j in hessian_pairs(z.dim)])
    return Jet2(sig, s1 * z.dval, curv + s1 * z.d2val)


class ParamGradient:
    """Flattened parameter gradient aligned with ``net.parameters()``."""

    def __init__(self, tensors: list[torch.Tensor]):
        self.tensors = [t.detach() for t in tensors]
        self.flat = torch.cat([t.reshape(-1) for t in self.tensors]) if self.tensors else torch.zeros(0, dtype=DTYPE)
        self.norm = float(torch.linalg.vector_norm(self.flat))

    def __len__(self):
        return self.flat.numel()

    def cosine(self, other: "ParamGradient") -> float:
        """Directional coherence between two gradients (0 when either vanishes)."""
        denom = self.norm * other.norm
        if denom == 0.0:
            return 0.0
        return float(torch.dot(self.flat, other.flat)) / denom


def loss_param_gradient(net: torch.nn.Module, loss_fn: Callable[[torch.nn.Module], torch.Tensor]):
    """Evaluate ``loss_fn(net)`` and its exact gradient w.r.t. every parameter.

    The jet-augmented forward pass is recorded by torch autograd, so the
    reverse sweep differentiates through the input-derivative channels too.
    """
    params = [p for p in net.parameters()]
    loss = loss_fn(net)
    value = float(loss.detach())
    if not torch.isfinite(loss.detach()):
        raise DivergenceError(f"non-finite loss {value}")
    if loss.requires_grad:
        grads = torch.autograd.grad(loss, params, allow_unused=True)
        grads = [torch.zeros_like(p) if g is None else g for p, g in zip(params, grads)]
    else:
        grads = [torch.zeros_like(p) for p in params]
    return value, ParamGradient(grads)
