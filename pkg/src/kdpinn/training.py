"""Teacher/student loss assembly, Adam, and the two-stage KD-PINN training loop."""

from __future__ import annotations

import csv
import logging
import math
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np
import torch

from .errors import ConfigError, DivergenceError
from .jets import DTYPE, ParamGradient, loss_param_gradient
from .metrics import compare_fields, accuracy
from .net import LayerSpec, MlpNetwork, init_xavier
from .problems.base import PdeProblem
from .sampling import SampleBatch, informed_weights, role_streams, sample_role
from .seeding import derive_seed

log = logging.getLogger(__name__)

ROLE_TERM = {"boundary": "bc", "terminal": "term", "initial": "ic"}


@dataclass
class LossWeights:
    w_pde: float = 1.0
    w_bc: float = 12.0
    w_term: float = 15.0
    w_ic: float = 15.0
    w_kd: float = 1.5
    tau: float = 1.25
    huber_delta: float | None = 1.0  # None -> plain squared error on constraints
    kd_huber: bool = False

    def __post_init__(self):
        if self.tau <= 0:
            raise ConfigError("tau must be positive")
        ws = (self.w_pde, self.w_bc, self.w_term, self.w_ic, self.w_kd)
        if any(w < 0 for w in ws) or not any(w > 0 for w in ws):
            raise ConfigError("loss weights must be nonnegative with at least one positive")
        if self.huber_delta is not None and self.huber_delta <= 0:
            raise ConfigError("huber_delta must be positive")

    def role_weight(self, role: str) -> float:
        return getattr(self, "w_" + ROLE_TERM[role])


@dataclass
class TrainConfig:
    iterations: int = 8000
    fine_tune_iterations: int = 300
    learning_rate: float = 1e-3
    fine_tune_lr: float = 1e-4
    n_collocation: int = 4096
    n_boundary: int = 256
    n_terminal: int = 512  # also the initial-condition batch for time-forward problems
    n_distill: int = 4096
    curriculum_fraction: float | None = None  # T_c as a fraction of `iterations`
    informed_eta: float | None = None
    seed: int = 0
    probe_every: int = 50
    weights: LossWeights = field(default_factory=LossWeights)

    def __post_init__(self):
        if isinstance(self.weights, dict):
            self.weights = LossWeights(**self.weights)
        if self.iterations < 1 or self.fine_tune_iterations < 0:
            raise ConfigError("iterations must be >= 1 and fine_tune_iterations >= 0")
        if self.learning_rate <= 0 or self.fine_tune_lr <= 0:
            raise ConfigError("learning rates must be positive")

    @property
    def total_iterations(self) -> int:
        return self.iterations + self.fine_tune_iterations

    def batch_size(self, role: str) -> int:
        return {"collocation": self.n_collocation, "boundary": self.n_boundary, "terminal": self.n_terminal,
                "initial": self.n_terminal, "distillation": self.n_distill}[role]

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown train-config keys {sorted(unknown)}; valid keys: {sorted(known)}")
        return cls(**d)


@dataclass
class LossBreakdown:
    iteration: int
    l_pde: float
    l_bc: float
    l_term: float
    l_ic: float
    l_kd: float
    total: float
    grad_norm: float
    curriculum: float = 1.0
    lr: float = float("nan")
    rmse_probe: float = float("nan")


HISTORY_COLUMNS = ["iter", "L_pde", "L_bc", "L_term", "L_ic", "L_kd", "total", "grad_norm", "curriculum", "lr",
                   "rmse_probe"]


def write_history(path, history: list[LossBreakdown]) -> Path:
    path = Path(path)
    with path.open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(HISTORY_COLUMNS)
        for h in history:
            w.writerow([h.iteration, *(repr(float(v)) for v in (h.l_pde, h.l_bc, h.l_term, h.l_ic, h.l_kd, h.total,
                                                                h.grad_norm, h.curriculum, h.lr, h.rmse_probe))])
    return path


def huber(r, delta: float):
    """Quadratic for |r| <= delta, linear beyond; works on tensors and arrays."""
    if delta <= 0:
        raise ValueError("delta must be positive")
    if isinstance(r, torch.Tensor):
        a = r.abs()
        return torch.where(a <= delta, 0.5 * r * r, delta * (a - 0.5 * delta))
    a = np.abs(r)
    return np.where(a <= delta, 0.5 * np.asarray(r) ** 2, delta * (a - 0.5 * delta))


def kl_gaussian(mu_t, sigma_t, mu_s, sigma_s):
    """KL( N(mu_t, sigma_t^2) || N(mu_s, sigma_s^2) )."""
    ratio = (np.asarray(sigma_t, dtype=float) / np.asarray(sigma_s, dtype=float)) ** 2
    return 0.5 * ((np.asarray(mu_t) - np.asarray(mu_s)) ** 2 / np.asarray(sigma_s) ** 2 + ratio - 1.0 - np.log(ratio))


def curriculum(iteration: int, t_c: int) -> float:
    if t_c < 1:
        raise ValueError("T_c must be >= 1")
    return min(1.0, iteration / t_c)


def _penalty(mismatch: torch.Tensor, delta: float | None) -> torch.Tensor:
    if delta is None:
        return (mismatch * mismatch).mean()
    return huber(mismatch, delta).mean()


def physics_terms(net: MlpNetwork, problem: PdeProblem, batches: dict[str, SampleBatch],
                  weights: LossWeights) -> dict[str, torch.Tensor]:
    """Unweighted PDE and constraint losses keyed by 'pde', 'bc', 'term', 'ic'."""
    terms = {}
    col = batches["collocation"]
    x = col.tensor()
    res = problem.residual(x, net.forward_jets(x))
    w = torch.from_numpy(np.asarray(col.weights, dtype=np.float64))
    terms["pde"] = (w * (res * res).mean(dim=0)).mean()
    for c in problem.constraints:
        if c.role not in batches:
            continue
        b = batches[c.role]
        target = torch.from_numpy(np.asarray(c.target(b.points), dtype=np.float64))
        terms[ROLE_TERM[c.role]] = _penalty(net(b.tensor()) - target, weights.huber_delta)
    return terms


def _weighted_physics(terms, weights: LossWeights) -> torch.Tensor:
    total = weights.w_pde * terms["pde"]
    for role, key in ROLE_TERM.items():
        if key in terms:
            total = total + weights.role_weight(role) * terms[key]
    return total


def teacher_loss(net, problem, batches, weights: LossWeights):
    """Returns (total tensor, dict of unweighted term values)."""
    terms = physics_terms(net, problem, batches, weights)
    return _weighted_physics(terms, weights), terms


def kd_term(student_out: torch.Tensor, teacher_out: torch.Tensor, weights: LossWeights) -> torch.Tensor:
    diff = student_out / weights.tau - teacher_out / weights.tau
    if weights.kd_huber:
        return huber(diff, weights.huber_delta or 1.0).mean()
    return (diff * diff).mean()


def student_loss(student, teacher, problem, batches, weights: LossWeights, c: float = 1.0, teacher_targets=None):
    """Curriculum-scaled physics terms plus the temperature-scaled distillation term."""
    if not 0.0 <= c <= 1.0:
        raise ValueError("curriculum value must lie in [0, 1]")
    kd_batch = batches["distillation"]
    xk = kd_batch.tensor()
    if teacher_targets is None:
        with torch.no_grad():
            teacher_targets = teacher(xk)
    terms = physics_terms(student, problem, batches, weights)
    terms["kd"] = kd_term(student(xk), teacher_targets, weights)
    total = c * _weighted_physics(terms, weights) + weights.w_kd * terms["kd"]
    return total, terms


# ---- optimizer -------------------------------------------------------------

@dataclass
class AdamState:
    m: list
    v: list
    step: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def like(cls, params) -> "AdamState":
        return cls([torch.zeros_like(p) for p in params], [torch.zeros_like(p) for p in params])


@torch.no_grad()
def adam_step(state: AdamState, params, grad: ParamGradient, lr: float) -> AdamState:
    if not torch.isfinite(grad.flat).all():
        raise DivergenceError("non-finite gradient")
    state.step += 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1**state.step
    c2 = 1.0 - b2**state.step
    for p, g, m, v in zip(params, grad.tensors, state.m, state.v):
        m.mul_(b1).add_(g, alpha=1.0 - b1)
        v.mul_(b2).addcmul_(g, g, value=1.0 - b2)
        p.sub_(lr * (m / c1) / ((v / c2).sqrt() + state.eps))
    return state


# ---- training loops --------------------------------------------------------

@dataclass
class Probe:
    """Fixed evaluation grid with precomputed reference values."""

    problem: PdeProblem
    points: np.ndarray
    ref: np.ndarray

    @classmethod
    def for_problem(cls, problem: PdeProblem, resolution=None) -> "Probe":
        pts = problem.domain.grid(*(resolution or problem.eval_resolution))
        return cls(problem, pts, problem.reference(pts))

    def rmse(self, net) -> float:
        with torch.no_grad():
            pred = net(torch.from_numpy(self.points)).numpy()
        return accuracy(*compare_fields(self.problem, pred, self.ref, self.points)).rmse


def _fit(net: MlpNetwork, problem: PdeProblem, config: TrainConfig, label: str, loss_fn,
         roles, curriculum_steps: int | None, probe: Probe | None, informed=None):
    streams = role_streams(derive_seed(config.seed, label + "/sampling"), problem.dim, roles)
    params = list(net.parameters())
    state = AdamState.like(params)
    history: list[LossBreakdown] = []
    best_loss, best_params = math.inf, net.flat_parameters().clone()
    for it in range(config.total_iterations):
        lr = config.learning_rate if it < config.iterations else config.fine_tune_lr
        c = 1.0 if curriculum_steps is None else curriculum(it, curriculum_steps)
        batches = {r: sample_role(problem, r, config.batch_size(r), streams[r]) for r in roles}
        if informed is not None:
            batches["collocation"] = informed(batches["collocation"])
        captured = {}

        def closure(n):
            total, terms = loss_fn(n, batches, c)
            captured.update({k: float(v.detach()) for k, v in terms.items()})
            return total

        try:
            value, grad = loss_param_gradient(net, closure)
        except DivergenceError as exc:
            net.set_flat_parameters(best_params)
            raise DivergenceError(f"{label} diverged at iteration {it}: {exc}", net, history) from exc
        rec = LossBreakdown(
            iteration=it,
            l_pde=captured["pde"],
            l_bc=captured.get("bc", float("nan")),
            l_term=captured.get("term", float("nan")),
            l_ic=captured.get("ic", float("nan")),
            l_kd=captured.get("kd", float("nan")),
            total=value,
            grad_norm=grad.norm,
            curriculum=c,
            lr=lr,
        )
        if probe is not None and config.probe_every and it % config.probe_every == 0:
            rec.rmse_probe = probe.rmse(net)
        history.append(rec)
        if c == 1.0 and value < best_loss:
            best_loss, best_params = value, net.flat_parameters().clone()
        try:
            adam_step(state, params, grad, lr)
        except DivergenceError as exc:
            net.set_flat_parameters(best_params)
            raise DivergenceError(f"{label} diverged at iteration {it}: {exc}", net, history) from exc
        if it % 500 == 0:
            log.info("%s iter %d total %.3e", label, it, value)
    net.set_flat_parameters(best_params)
    return net, history


def _constraint_roles(problem: PdeProblem) -> tuple[str, ...]:
    return ("collocation",) + tuple(c.role for c in problem.constraints)


def train_teacher(problem: PdeProblem, spec: LayerSpec, config: TrainConfig, probe: Probe | None = None):
    """Pretrain the teacher; returns (best-checkpoint network, loss history)."""
    net = init_xavier(spec, derive_seed(config.seed, "teacher/init"), problem.domain.lo, problem.domain.hi)

    def loss_fn(n, batches, c):
        return teacher_loss(n, problem, batches, config.weights)

    return _fit(net, problem, config, "teacher", loss_fn, _constraint_roles(problem), None, probe)


def distill_student(problem: PdeProblem, teacher: MlpNetwork, spec: LayerSpec, config: TrainConfig,
                    probe: Probe | None = None):
    """Distill a student against a frozen teacher; returns (network, loss history)."""
    for p in teacher.parameters():
        p.requires_grad_(False)
    net = init_xavier(spec, derive_seed(config.seed, "student/init"), problem.domain.lo, problem.domain.hi)
    steps = None
    if config.curriculum_fraction:
        steps = max(1, int(round(config.curriculum_fraction * config.iterations)))
    informed = None
    if config.informed_eta is not None:
        def informed(batch):
            return informed_weights(batch, teacher, problem, config.informed_eta)

    def loss_fn(n, batches, c):
        return student_loss(n, teacher, problem, batches, config.weights, c)

    try:
        return _fit(net, problem, config, "student", loss_fn, _constraint_roles(problem) + ("distillation",),
                    steps, probe, informed)
    finally:
        for p in teacher.parameters():
            p.requires_grad_(True)
