"""Accuracy, correlation, calibration, out-of-domain distance and KD transfer bounds."""

from __future__ import annotations

import csv
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np
import torch

from .problems.base import DomainBox, PdeProblem

ZERO_NORM = 1e-300


@dataclass
class EvalGrid:
    box: DomainBox
    resolution: tuple[int, ...]

    @property
    def points(self) -> np.ndarray:
        return self.box.grid(*self.resolution)


@dataclass
class AccuracyReport:
    rmse: float
    rel_l2: float
    n_points: int
    rel_l2_undefined: bool = False

    def to_dict(self) -> dict:
        return asdict(self)


def accuracy(pred, ref) -> AccuracyReport:
    pred = np.asarray(pred, dtype=float).ravel()
    ref = np.asarray(ref, dtype=float).ravel()
    if pred.shape != ref.shape or pred.size == 0:
        raise ValueError(f"pred and ref must be non-empty and equal length ({pred.size} vs {ref.size})")
    diff = pred - ref
    rmse = float(np.sqrt(np.mean(diff * diff)))
    ref_norm = float(np.linalg.norm(ref))
    if ref_norm < ZERO_NORM:
        return AccuracyReport(rmse, float("nan"), pred.size, True)
    return AccuracyReport(rmse, float(np.linalg.norm(diff)) / ref_norm, pred.size)


def remove_gauge(values: np.ndarray, points: np.ndarray, time_axis: int | None, outputs) -> np.ndarray:
    """Subtract the per-time-slice spatial mean from the selected output columns."""
    values = np.array(values, dtype=float, copy=True)
    if not outputs:
        return values
    if time_axis is None:
        values[:, list(outputs)] -= values[:, list(outputs)].mean(axis=0)
        return values
    t = points[:, time_axis]
    for tv in np.unique(t):
        sel = t == tv
        for k in outputs:
            values[sel, k] -= values[sel, k].mean()
    return values


def predict(net, points) -> np.ndarray:
    with torch.no_grad():
        return net(torch.as_tensor(np.asarray(points, dtype=float))).numpy()


def compare_fields(problem: PdeProblem, pred: np.ndarray, ref: np.ndarray, points: np.ndarray):
    """Flatten outputs for comparison, applying the problem's pressure gauge."""
    if problem.gauge_outputs:
        pred = remove_gauge(pred, points, problem.domain.time_axis, problem.gauge_outputs)
        ref = remove_gauge(ref, points, problem.domain.time_axis, problem.gauge_outputs)
    return np.asarray(pred).ravel(), np.asarray(ref).ravel()


def evaluate(net, problem: PdeProblem, points: np.ndarray, ref: np.ndarray | None = None) -> AccuracyReport:
    if ref is None:
        ref = problem.reference(points)
    return accuracy(*compare_fields(problem, predict(net, points), ref, points))


def pearson(a, b) -> float:
    a = np.asarray(a, dtype=float).ravel()
    b = np.asarray(b, dtype=float).ravel()
    if a.size != b.size or a.size < 3:
        raise ValueError("need two equal-length samples of at least 3 points")
    da, db = a - a.mean(), b - b.mean()
    denom = np.sqrt(np.dot(da, da) * np.dot(db, db))
    if denom == 0.0:
        return float("nan")
    return float(np.dot(da, db) / denom)


def residual_correlation(teacher_err, student_err) -> tuple[float, float]:
    """Pearson rho of signed errors and squared correlation of |errors|.

    NaN marks a zero-variance input.
    """
    rho = pearson(teacher_err, student_err)
    r_abs = pearson(np.abs(teacher_err), np.abs(student_err))
    return rho, r_abs * r_abs


def calibration_r2(pred, ref) -> float:
    pred = np.asarray(pred, dtype=float).ravel()
    ref = np.asarray(ref, dtype=float).ravel()
    if pred.size != ref.size or pred.size < 3:
        raise ValueError("need two equal-length samples of at least 3 points")
    ss_tot = float(np.sum((ref - ref.mean()) ** 2))
    if ss_tot == 0.0:
        return float("nan")
    return 1.0 - float(np.sum((pred - ref) ** 2)) / ss_tot


def dist_linf_to_box(points, box: DomainBox) -> np.ndarray:
    """Chebyshev distance to a closed box (0 inside)."""
    x = np.asarray(points, dtype=float)
    lo, hi = np.asarray(box.lo), np.asarray(box.hi)
    over = np.maximum(0.0, np.maximum(lo - x, x - hi))
    return over.max(axis=-1)


@dataclass
class DistanceBins:
    edges: np.ndarray
    median_abs_error: np.ndarray  # NaN where a bin is empty
    counts: np.ndarray

    @property
    def empty(self) -> np.ndarray:
        return self.counts == 0


def error_vs_distance(abs_error, distance, n_bins: int) -> DistanceBins:
    """Median |error| in equal-width bins of the distance to the training box."""
    err = np.abs(np.asarray(abs_error, dtype=float)).ravel()
    dist = np.asarray(distance, dtype=float).ravel()
    if err.size == 0:
        raise ValueError("empty grid")
    edges = np.linspace(0.0, float(dist.max()), n_bins + 1)
    which = np.clip(np.searchsorted(edges, dist, side="right") - 1, 0, n_bins - 1)
    med = np.full(n_bins, np.nan)
    counts = np.bincount(which, minlength=n_bins)
    for b in range(n_bins):
        if counts[b]:
            med[b] = np.median(err[which == b])
    return DistanceBins(edges, med, counts)


def abs_error_cdf(abs_error, n_levels: int = 200) -> tuple[np.ndarray, np.ndarray]:
    """Empirical CDF of |error| sampled at ``n_levels`` quantile points."""
    e = np.sort(np.abs(np.asarray(abs_error, dtype=float)).ravel())
    probs = np.linspace(0.0, 1.0, n_levels)
    return np.quantile(e, probs), probs


@dataclass
class TransferBoundInputs:
    eps_teacher: float  # teacher L2 error
    delta_teacher: float  # teacher residual L2 norm
    eps_distill: float  # student-teacher L2 distance
    lipschitz: float
    kappa: float  # stability constant

    def __post_init__(self):
        for k, v in asdict(self).items():
            if v < 0:
                raise ValueError(f"{k} must be nonnegative")


def transfer_bounds(inputs: TransferBoundInputs) -> tuple[float, float]:
    """(student residual bound, student error bound)."""
    residual_bound = inputs.lipschitz * inputs.eps_distill + inputs.delta_teacher
    return residual_bound, inputs.eps_teacher + inputs.kappa * residual_bound


def l2_norm_on_grid(values, box: DomainBox, resolution) -> float:
    """Grid quadrature of the L2 norm: uniform weights times the cell volume."""
    v = np.asarray(values, dtype=float).reshape(int(np.prod(resolution)), -1)
    cell = np.prod([(b - a) / (n - 1) for a, b, n in zip(box.lo, box.hi, resolution)])
    return float(np.sqrt(np.sum(v * v) * cell))


def residual_field(net, problem: PdeProblem, points) -> np.ndarray:
    x = torch.as_tensor(np.asarray(points, dtype=float))
    return problem.residual(x, net.forward_jets(x)).detach().numpy().T


def empirical_lipschitz(nets, problem: PdeProblem, points) -> float:
    """Max of ||N[u]-N[v]|| / ||u-v|| over all pairs of the given networks."""
    outs = [predict(n, points) for n in nets]
    res = [residual_field(n, problem, points) for n in nets]
    best = 0.0
    for i in range(len(nets)):
        for j in range(i + 1, len(nets)):
            du = np.linalg.norm(outs[i] - outs[j])
            if du > 0:
                best = max(best, float(np.linalg.norm(res[i] - res[j]) / du))
    return best


def write_error_field(path, points, pred, ref, names=("S", "t")) -> Path:
    path = Path(path)
    pred = np.asarray(pred, dtype=float).reshape(len(points), -1)
    ref = np.asarray(ref, dtype=float).reshape(len(points), -1)
    with path.open("w", newline="") as fh:
        w = csv.writer(fh)
        k = pred.shape[1]
        suffix = [""] if k == 1 else [f"_{i}" for i in range(k)]
        w.writerow([*names, *(f"pred{s}" for s in suffix), *(f"ref{s}" for s in suffix), *(f"error{s}" for s in suffix)])
        for p, a, b in zip(points, pred, ref):
            w.writerow([*(f"{v:.17g}" for v in p), *(f"{v:.17g}" for v in a), *(f"{v:.17g}" for v in b),
                        *(f"{v:.17g}" for v in a - b)])
    return path
