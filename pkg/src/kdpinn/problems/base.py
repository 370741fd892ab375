from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable

import numpy as np
import torch

from ..jets import Jet2

ROLES = ("collocation", "boundary", "terminal", "initial", "distillation")


@dataclass(frozen=True)
class DomainBox:
    lo: tuple[float, ...]
    hi: tuple[float, ...]
    names: tuple[str, ...] = ()
    time_axis: int | None = None

    def __post_init__(self):
        object.__setattr__(self, "lo", tuple(float(v) for v in self.lo))
        object.__setattr__(self, "hi", tuple(float(v) for v in self.hi))
        if len(self.lo) != len(self.hi):
            raise ValueError("lo and hi must have the same length")
        if any(a >= b for a, b in zip(self.lo, self.hi)):
            raise ValueError(f"degenerate box lo={self.lo} hi={self.hi}")
        if not self.names:
            object.__setattr__(self, "names", tuple(f"x{i}" for i in range(len(self.lo))))

    @property
    def dim(self) -> int:
        return len(self.lo)

    def map_unit(self, u: np.ndarray) -> np.ndarray:
        """Map points of [0,1)^d onto the box."""
        lo, hi = np.asarray(self.lo), np.asarray(self.hi)
        return lo + u * (hi - lo)

    def contains(self, x: np.ndarray, tol: float = 0.0) -> np.ndarray:
        x = np.asarray(x)
        return np.all((x >= np.asarray(self.lo) - tol) & (x <= np.asarray(self.hi) + tol), axis=-1)

    def grid(self, *resolution: int) -> np.ndarray:
        """Uniform tensor grid including the endpoints, first axis slowest."""
        if len(resolution) != self.dim:
            raise ValueError(f"need {self.dim} resolutions, got {len(resolution)}")
        axes = [np.linspace(a, b, n) for a, b, n in zip(self.lo, self.hi, resolution)]
        mesh = np.meshgrid(*axes, indexing="ij")
        return np.stack([m.reshape(-1) for m in mesh], axis=1)

    def to_dict(self) -> dict:
        return {"lo": list(self.lo), "hi": list(self.hi), "names": list(self.names), "time_axis": self.time_axis}


@dataclass(frozen=True)
class Face:
    axis: int
    value: float


@dataclass
class Constraint:
    """A data condition on a face set, e.g. Dirichlet walls or a terminal payoff."""

    role: str
    faces: tuple[Face, ...]
    target: Callable[[np.ndarray], np.ndarray]  # (N, d) -> (N, n_outputs)


@dataclass
class ReferenceSolution:
    kind: str  # closed_form | quadrature | oracle_grid
    evaluator: Callable[[np.ndarray], np.ndarray]  # (N, d) -> (N, n_outputs)
    note: str = ""

    def __call__(self, x) -> np.ndarray:
        return self.evaluator(np.atleast_2d(np.asarray(x, dtype=float)))


@dataclass
class PdeProblem:
    name: str
    domain: DomainBox
    n_outputs: int
    residual: Callable[[torch.Tensor, list[Jet2]], torch.Tensor]  # -> (n_equations, N)
    constraints: list[Constraint]
    reference: ReferenceSolution
    params: dict = field(default_factory=dict)
    output_names: tuple[str, ...] = ("u",)
    # analytic residual of the reference, (N, d) -> (n_equations, N); closed forms only
    reference_residual: Callable[[np.ndarray], np.ndarray] | None = None
    # outputs compared after removing their spatial mean at fixed time
    gauge_outputs: tuple[int, ...] = ()
    eval_resolution: tuple[int, ...] = ()

    @property
    def dim(self) -> int:
        return self.domain.dim

    @property
    def roles(self) -> tuple[str, ...]:
        return ("collocation",) + tuple(c.role for c in self.constraints) + ("distillation",)

    def constraint(self, role: str) -> Constraint:
        for c in self.constraints:
            if c.role == role:
                return c
        raise ValueError(f"problem {self.name!r} has no {role!r} constraint; roles: {self.roles}")

    def residual_of(self, net, x) -> torch.Tensor:
        x = torch.as_tensor(x, dtype=torch.float64)
        return self.residual(x, net.forward_jets(x))

    def describe(self) -> dict:
        return {"name": self.name, "domain": self.domain.to_dict(), "params": dict(self.params),
                "n_outputs": self.n_outputs, "reference": {"kind": self.reference.kind, "note": self.reference.note}}


def check_positive(**kwargs) -> None:
    from ..errors import ConfigError

    for k, v in kwargs.items():
        if not (np.isfinite(v) and v > 0):
            raise ConfigError(f"{k} must be positive, got {v}")
