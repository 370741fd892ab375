"""Quasi-random point generation for collocation, constraint and distillation sets.

Sobol points use Joe-Kuo direction numbers (enough for d <= 3) in Gray-code
order. Scrambling is the hash-based nested uniform (Owen) scramble of Burley
(2020): reverse the bits, apply a Laine-Karras style permutation in which
each output bit depends only on lower input bits, reverse back. This keeps
the (0, m, 2)-net structure of the first two coordinates.
"""

from __future__ import annotations

import csv
import warnings
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch

from .problems.base import ROLES, DomainBox, PdeProblem

BITS = 32
MAX_INDEX = 1 << BITS
MASK = np.uint64(MAX_INDEX - 1)

# (degree s, coefficient bits a, initial m_1..m_s) for dimensions 2 and 3
_JOE_KUO = [(1, 0, (1,)), (2, 1, (1, 3))]


def _direction_numbers(d: int) -> np.ndarray:
    V = np.zeros((d, BITS), dtype=np.uint64)
    V[0] = [1 << (BITS - 1 - k) for k in range(BITS)]
    for dim in range(1, d):
        s, a, m = _JOE_KUO[dim - 1]
        v = [0] * (BITS + 1)
        for i in range(1, s + 1):
            v[i] = m[i - 1] << (BITS - i)
        for i in range(s + 1, BITS + 1):
            v[i] = v[i - s] ^ (v[i - s] >> s)
            for k in range(1, s):
                if (a >> (s - 1 - k)) & 1:
                    v[i] ^= v[i - k]
        V[dim] = v[1:]
    return V


def _reverse_bits(x: np.ndarray) -> np.ndarray:
    x = x & MASK
    x = ((x >> np.uint64(1)) & np.uint64(0x55555555)) | ((x & np.uint64(0x55555555)) << np.uint64(1))
    x = ((x >> np.uint64(2)) & np.uint64(0x33333333)) | ((x & np.uint64(0x33333333)) << np.uint64(2))
    x = ((x >> np.uint64(4)) & np.uint64(0x0F0F0F0F)) | ((x & np.uint64(0x0F0F0F0F)) << np.uint64(4))
    x = ((x >> np.uint64(8)) & np.uint64(0x00FF00FF)) | ((x & np.uint64(0x00FF00FF)) << np.uint64(8))
    x = (x >> np.uint64(16)) | ((x & np.uint64(0xFFFF)) << np.uint64(16))
    return x & MASK


def _laine_karras(x: np.ndarray, seed: np.uint64) -> np.ndarray:
    x = (x + seed) & MASK
    for c in (0x6C50B47C, 0xB82F1E52, 0xC7AFE638, 0x8D22F6E6):
        x = (x ^ (x * np.uint64(c))) & MASK
    return x


def owen_scramble(x: np.ndarray, seed) -> np.ndarray:
    """Nested uniform scramble of 32-bit integers (MSB = coarsest digit)."""
    return _reverse_bits(_laine_karras(_reverse_bits(x), np.uint64(seed)))


def sobol_integers(index: np.ndarray, d: int) -> np.ndarray:
    """Unscrambled 32-bit Sobol integers for the given indices, shape (n, d)."""
    if not 1 <= d <= len(_JOE_KUO) + 1:
        raise ValueError(f"Sobol dimension must be in [1, {len(_JOE_KUO) + 1}], got {d}")
    V = _direction_numbers(d)
    idx = np.asarray(index, dtype=np.uint64)
    gray = idx ^ (idx >> np.uint64(1))
    out = np.zeros((idx.size, d), dtype=np.uint64)
    for k in range(BITS):
        bit = ((gray >> np.uint64(k)) & np.uint64(1)).astype(bool)
        out[bit] ^= V[:, k]
    return out


class SobolStream:
    """Stateful Sobol generator; ``seed=None`` gives the unscrambled sequence."""

    def __init__(self, d: int, seed: int | None = None, counter: int = 0):
        if not 1 <= d <= 3:
            raise ValueError(f"dimension must be in [1, 3], got {d}")
        self.d = d
        self.seed = seed
        self.counter = int(counter)
        if seed is None:
            self._dim_seeds = None
        else:
            state = np.random.SeedSequence(int(seed) & ((1 << 64) - 1)).generate_state(d, dtype=np.uint32)
            self._dim_seeds = [np.uint64(s) for s in state]

    def next(self, n: int) -> np.ndarray:
        if n < 1:
            raise ValueError("n must be >= 1")
        if self.counter + n > MAX_INDEX:
            raise OverflowError(f"Sobol counter would exceed 2^{BITS}")
        ints = sobol_integers(np.arange(self.counter, self.counter + n, dtype=np.uint64), self.d)
        if self._dim_seeds is not None:
            for j, s in enumerate(self._dim_seeds):
                ints[:, j] = owen_scramble(ints[:, j], s)
        self.counter += n
        return ints.astype(np.float64) / float(MAX_INDEX)

    def spawn(self, offset: int) -> "SobolStream":
        """Independent stream whose scramble seed is derived from this one."""
        base = 0 if self.seed is None else int(self.seed)
        return SobolStream(self.d, (base * 0x9E3779B97F4A7C15 + int(offset) + 1) & ((1 << 64) - 1))


def sobol_next(stream: SobolStream, n: int) -> np.ndarray:
    return stream.next(n)


@dataclass
class SampleBatch:
    role: str
    points: np.ndarray
    weights: np.ndarray = None

    def __post_init__(self):
        if self.weights is None:
            self.weights = np.ones(len(self.points))
        if np.any(self.weights <= 0):
            raise ValueError("sample weights must be positive")

    def __len__(self):
        return len(self.points)

    def tensor(self) -> torch.Tensor:
        return torch.from_numpy(np.ascontiguousarray(self.points, dtype=np.float64))

    def to_csv(self, path, names=None) -> Path:
        path = Path(path)
        names = list(names or [f"x{i}" for i in range(self.points.shape[1])])
        with path.open("w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["role", *names, "weight"])
            for p, wt in zip(self.points, self.weights):
                w.writerow([self.role, *(repr(float(v)) for v in p), repr(float(wt))])
        return path


def role_streams(seed: int, d: int, roles=ROLES) -> dict[str, SobolStream]:
    """One scrambled stream per role, all derived from a single seed."""
    children = np.random.SeedSequence(int(seed)).spawn(len(roles))
    return {role: SobolStream(d, int(c.generate_state(1, dtype=np.uint64)[0])) for role, c in zip(roles, children)}


def sample_role(problem: PdeProblem, role: str, n: int, stream: SobolStream) -> SampleBatch:
    if role not in problem.roles:
        raise ValueError(f"role {role!r} is not valid for {problem.name}; choose from {problem.roles}")
    if stream.d != problem.dim:
        raise ValueError("stream dimension does not match the problem")
    pts = problem.domain.map_unit(stream.next(n))
    if role in ("collocation", "distillation"):
        return SampleBatch(role, pts)
    faces = problem.constraint(role).faces
    for k, face in enumerate(faces):
        pts[k::len(faces), face.axis] = face.value
    return SampleBatch(role, pts)


def residual_weights(residual_magnitude, eta: float, normalize: bool = True) -> np.ndarray:
    """``1 + eta |r| / max |r|``, optionally rescaled to unit mean."""
    r = np.abs(np.asarray(residual_magnitude, dtype=float))
    if not 0.5 <= eta <= 1.0:
        warnings.warn(f"informed-sampling eta={eta} is outside [0.5, 1.0]", stacklevel=2)
    peak = r.max() if r.size else 0.0
    w = np.ones_like(r) if peak == 0.0 else 1.0 + eta * r / peak
    if normalize:
        w = w / w.mean()
    return w


def informed_weights(batch: SampleBatch, teacher, problem: PdeProblem, eta: float) -> SampleBatch:
    """Reweight collocation points by the teacher's normalized residual."""
    res = problem.residual_of(teacher, batch.tensor()).detach()
    mag = torch.linalg.vector_norm(res, dim=0).numpy()
    return SampleBatch(batch.role, batch.points, residual_weights(mag, eta))


@dataclass(frozen=True)
class OodRegion:
    name: str
    box: DomainBox
    resolution: tuple[int, int] = (200, 80)

    def grid(self) -> np.ndarray:
        return self.box.grid(*self.resolution)


def ood_regions() -> list[OodRegion]:
    """Evaluation boxes around the [0.5, 1.5] x [0, 1] Black-Scholes training box."""
    def box(s0, s1, t0=0.0, t1=1.0):
        return DomainBox((s0, t0), (s1, t1), ("S", "t"), time_axis=1)

    return [
        OodRegion("left", box(0.2, 0.49)),
        OodRegion("mild_right", box(1.6, 2.0)),
        OodRegion("moderate_right", box(2.0, 3.0)),
        OodRegion("hard_right", box(3.0, 5.0)),
        OodRegion("diag", box(1.6, 3.0, 0.6, 1.0)),
    ]
