"""One pass/fail line per acceptance criterion, at the stated tolerances.

Criteria 7, 9 and 10 share one desk-scale training fixture: for each of the
five seeds a teacher is trained once and reused by the in-domain run, the OOD
suite and the identical-architecture ablation.
"""

import math
import os

import numpy as np
import pytest
import torch

from kdpinn import experiments as E
from kdpinn.jets import loss_param_gradient
from kdpinn.net import LayerSpec, init_xavier, mac_count
from kdpinn.perf import combined_bound, measure_latency, speedup_ratio, cpu_model
from kdpinn.problems import make_problem
from kdpinn.problems.navier_stokes import taylor_green_residuals
from kdpinn.sampling import SobolStream, informed_weights, residual_weights
from kdpinn.training import LossWeights, curriculum, huber, kl_gaussian, student_loss
from scipy.stats import qmc

from conftest import ACCEPTANCE_LINES, fd_grad_hess
from helpers import fd_param_gradient, fixed_batches

SEEDS = [int(s) for s in os.environ.get("KDPINN_ACCEPTANCE_SEEDS", "0,1,2,3,4").split(",")]


def report(number, title, passed, detail):
    line = f"[{'PASS' if passed else 'FAIL'}] criterion {number}: {title} -- {detail}"
    ACCEPTANCE_LINES.append(line)
    print(line)
    assert passed, line


def majority(flags):
    return sum(bool(f) for f in flags) >= 3


# ---- 1 ---------------------------------------------------------------------

PROBLEM_DIMS = [("black_scholes", 2, 1), ("burgers", 2, 1), ("allen_cahn", 2, 1), ("navier_stokes", 3, 3)]


def _rel(a, b):
    a, b = np.asarray(a, float), np.asarray(b, float)
    floor = max(1e-3 * np.abs(b).max(), 1e-6)
    return float(np.max(np.abs(a - b) / np.maximum(np.abs(b), floor)))


def test_criterion_1_autodiff_correctness():
    rng = np.random.default_rng(2024)
    worst_in, worst_param = 0.0, 0.0
    problems = {name: make_problem(name, **({"nx": 64, "nt": 40} if name == "allen_cahn" else {}))
                for name, _, _ in PROBLEM_DIMS}
    for k in range(20):
        name, d_in, d_out = PROBLEM_DIMS[k % len(PROBLEM_DIMS)]
        act = "tanh" if k % 2 == 0 else "silu"
        hidden = tuple(int(w) for w in rng.integers(2, 9, size=int(rng.integers(1, 3))))
        problem = problems[name]
        lo, hi = problem.domain.lo, problem.domain.hi
        student = init_xavier(LayerSpec((d_in, *hidden, d_out), act), 100 + k, lo, hi)
        teacher = init_xavier(LayerSpec((d_in, 8, 8, d_out), "tanh"), 200 + k, lo, hi)
        # input derivatives at a random interior point
        x = rng.uniform(lo, hi)
        jets = student.forward_jets(torch.from_numpy(x[None]))
        for c in range(d_out):
            def f(v, c=c):
                with torch.no_grad():
                    return student(torch.from_numpy(v[None]))[0, c].item()
            g, H = fd_grad_hess(f, x)
            worst_in = max(worst_in, _rel(jets[c].gradient()[0].detach(), g), _rel(jets[c].hessian()[0].detach(), H))
        # parameter gradient of the full student loss (Huber, curriculum, temperature, informed weights)
        batches = fixed_batches(problem, 8, k)
        batches["collocation"] = informed_weights(batches["collocation"], teacher, problem, 0.75)
        w = LossWeights(huber_delta=float(rng.choice([0.05, 1.0])), kd_huber=bool(k % 3 == 0), tau=1.25)
        c = float(rng.uniform(0.2, 1.0))

        def loss(n):
            return student_loss(n, teacher, problem, batches, w, c)[0]

        _, grad = loss_param_gradient(student, loss)
        worst_param = max(worst_param, _rel(grad.flat.numpy(), fd_param_gradient(student, loss)))
    report(1, "autodiff vs central differences (20 nets)", worst_in < 1e-5 and worst_param < 1e-5,
           f"max rel err inputs {worst_in:.2e}, parameters {worst_param:.2e} (tol 1e-5)")


# ---- 2 ---------------------------------------------------------------------

def test_criterion_2_reference_residuals():
    bs = make_problem("black_scholes")
    s = np.linspace(0.5, 1.5, 52)[1:-1]
    t = np.linspace(0.0, 1.0, 52)[1:-1]
    S, T = np.meshgrid(s, t, indexing="ij")
    bs_res = float(np.max(np.abs(bs.reference_residual(np.column_stack([S.ravel(), T.ravel()])))))
    g = np.linspace(0, 2 * np.pi, 52)[1:-1]
    X, Y = np.meshgrid(g, g, indexing="ij")
    mom, div = 0.0, 0.0
    for tv in np.linspace(0, 1, 11):
        r = taylor_green_residuals(X, Y, np.full_like(X, tv), 1e-2)
        mom = max(mom, float(np.max(np.abs(r[:2]))))
        div = max(div, float(np.max(np.abs(r[2]))))
    report(2, "closed-form residuals", bs_res < 1e-8 and mom < 1e-8 and div < 1e-12,
           f"Black-Scholes {bs_res:.1e}, Taylor-Green momentum {mom:.1e} (tol 1e-8), divergence {div:.1e} (tol 1e-12)")


# ---- 3 ---------------------------------------------------------------------

def test_criterion_3_gaussian_kl_identity():
    rng = np.random.default_rng(3)
    mt, ms = rng.normal(0, 2, 10_000), rng.normal(0, 2, 10_000)
    sig = rng.uniform(0.05, 5.0, 10_000)
    err = float(np.max(np.abs(kl_gaussian(mt, sig, ms, sig) - (mt - ms) ** 2 / (2 * sig**2))))
    report(3, "equal-variance Gaussian KL identity", err < 1e-12, f"max abs err {err:.1e} over 1e4 tuples (tol 1e-12)")


# ---- 4 ---------------------------------------------------------------------

def test_criterion_4_flop_ratio_and_bound():
    ratio = mac_count(LayerSpec((2, 50, 50, 50, 1))) / mac_count(LayerSpec((2, 20, 20, 20, 1)))
    bounds = [combined_bound(10, f, 1) for f in np.linspace(0.02, 0.05, 7)]
    # the band is stated to two decimals (f = 0.05 gives 6.8966, quoted as 6.90)
    in_band = all(6.9 <= round(b, 2) <= 8.5 for b in bounds)
    ok = ratio == 5150 / 860 and abs(ratio - 5.988) < 1e-3 and in_band
    report(4, "MAC ratio and combined bound", ok,
           f"ratio {ratio:.4f}; combined_bound(10, f in [0.02, 0.05], 1) spans [{min(bounds):.4f}, {max(bounds):.4f}]")


# ---- 5 ---------------------------------------------------------------------

def test_criterion_5_sobol_owen():
    same = all(np.array_equal(SobolStream(d).next(256), qmc.Sobol(d, scramble=False).random(256)) for d in (1, 2, 3))
    first = SobolStream(1).next(4).ravel().tolist() == [0.0, 0.5, 0.75, 0.25]
    balanced = True
    for seed in (0, 1, 2):
        for m in range(1, 9):
            pts = SobolStream(2, seed=seed).next(1 << m)
            ints = (pts * (1 << 32)).astype(np.uint64)
            for a in range(m + 1):
                cx = ints[:, 0] >> np.uint64(32 - a) if a else np.zeros(len(ints), np.uint64)
                cy = ints[:, 1] >> np.uint64(32 - (m - a)) if m - a else np.zeros(len(ints), np.uint64)
                balanced &= len(np.unique(cx * np.uint64(1 << (m - a)) + cy)) == (1 << m)
    determ = np.array_equal(SobolStream(3, seed=7).next(5000), SobolStream(3, seed=7).next(5000))
    report(5, "Sobol / Owen scrambling", same and first and balanced and determ,
           f"matches standard construction {same and first}, (0,m,2)-nets m<=8 {balanced}, deterministic {determ}")


# ---- 6 ---------------------------------------------------------------------

def test_criterion_6_huber_curriculum_weights():
    d = 0.7
    # both branches meet at |r| = delta in value and in slope
    quad, lin = 0.5 * d * d, d * (d - 0.5 * d)
    eps = 1e-7
    slope_in = (huber(d, d) - huber(d - eps, d)) / eps
    slope_out = (huber(d + eps, d) - huber(d, d)) / eps
    cont = abs(huber(d, d) - quad) < 1e-15 and abs(quad - lin) < 1e-15 and abs(slope_in - slope_out) < 1e-6
    ends = curriculum(0, 1000) == 0.0 and curriculum(1000, 1000) == 1.0 and curriculum(5000, 1000) == 1.0
    bs = make_problem("black_scholes")
    t = init_xavier(LayerSpec((2, 5, 5, 1)), 0, bs.domain.lo, bs.domain.hi)
    s = init_xavier(LayerSpec((2, 3, 3, 1)), 1, bs.domain.lo, bs.domain.hi)
    total, terms = student_loss(s, t, bs, fixed_batches(bs, 64, 0), LossWeights(), c=0.6)
    expect = 0.6 * (terms["pde"] + 12 * terms["bc"] + 15 * terms["term"]) + 1.5 * terms["kd"]
    ident = abs(total.item() - expect.item()) <= 1e-12
    ex = residual_weights(np.array([0.0, 0.5, 1.0]), 0.5, normalize=False).tolist() == [1.0, 1.25, 1.5]
    report(6, "Huber / curriculum / loss weights", cont and ends and ident and ex,
           f"Huber continuous {cont}, c(t) endpoints {ends}, weighted total {ident}, (1,1.25,1.5) example {ex}")


# ---- desk-scale training fixture -------------------------------------------

@pytest.fixture(scope="module")
def desk(tmp_path_factory):
    recipe = E.load_recipe("bs_desk")
    root = tmp_path_factory.mktemp("desk")
    runs = []
    for seed in SEEDS:
        ind = E.run_in_domain_bs(recipe, root, seed=seed, measure=False)
        teacher = ind.nets["teacher"]
        ood = E.run_ood_suite(recipe, root, seed=seed, teacher=teacher, students={"baseline": ind.nets["student"]})
        abl = E.run_equal_arch_ablation(recipe, root, seed=seed, teacher=teacher, measure=(seed == SEEDS[0]))
        runs.append({"seed": seed, "in_domain": ind.doc, "ood": ood.doc, "ablation": abl.doc})
    return runs


@pytest.mark.slow
def test_criterion_7_black_scholes_desk(desk):
    per_seed = []
    for r in desk:
        rel = r["in_domain"]["student"]["rel_l2"]
        kd = r["in_domain"]["kd_decay"]["ratio"]
        per_seed.append((r["seed"], rel, kd, rel < 5e-2 and kd >= 1e2))
    detail = "; ".join(f"seed {s}: relL2 {rel:.2e}, KD drop x{kd:.0f}" for s, rel, kd, _ in per_seed)
    report(7, "desk Black-Scholes student (majority of seeds)", majority(p[3] for p in per_seed),
           f"{sum(p[3] for p in per_seed)}/{len(per_seed)} seeds meet relL2<5e-2 and KD drop>=1e2 at iter 500 [{detail}]")


def test_criterion_8_latency():
    teacher = init_xavier(LayerSpec((2, 50, 50, 50, 1)), 0, [0.5, 0.0], [1.5, 1.0])
    student = init_xavier(LayerSpec((2, 20, 20, 20, 1)), 0, [0.5, 0.0], [1.5, 1.0])
    rt = measure_latency(teacher, 20000, 20, 100, "teacher")
    rs = measure_latency(student, 20000, 20, 100, "student")
    ratio = speedup_ratio(rt, rs)
    bound = combined_bound(5150 / 860, 0.02, 1.0)
    # the bound comparison is advisory: it is reported, never failed on
    soft = "within" if ratio <= 1.25 * bound else "ABOVE"
    report(8, "single-thread latency speedup", ratio >= 3,
           f"teacher {rt.median_ms:.2f} ms, student {rs.median_ms:.2f} ms, ratio {ratio:.2f} (>= 3); "
           f"{soft} the soft cap 1.25 x combined bound = {1.25 * bound:.2f}; CPU {cpu_model()}")


@pytest.mark.slow
def test_criterion_9_equal_architecture_ablation(desk):
    wins = [r["ablation"]["accuracy"]["distilled"]["rmse"] <= r["ablation"]["accuracy"]["plain"]["rmse"] for r in desk]
    delta = desk[0]["ablation"]["latency"]["relative_delta"]
    detail = ", ".join(f"{r['ablation']['accuracy']['distilled']['rmse']:.2e}/{r['ablation']['accuracy']['plain']['rmse']:.2e}"
                       for r in desk)
    report(9, "identical-architecture ablation", delta < 0.10 and majority(wins),
           f"latency delta {100 * delta:.1f}% (< 10%); distilled<=plain RMSE in {sum(wins)}/{len(wins)} seeds [{detail}]")


@pytest.mark.slow
def test_criterion_10_kd_pinn_plus_ood(desk):
    counts = [len(r["ood"]["improved_regions"]) for r in desk]
    report(10, "KD-PINN+ OOD improvement", majority(c >= 3 for c in counts),
           f"regions improved per seed {counts}; seeds with >= 3 of 5: {sum(c >= 3 for c in counts)}/{len(counts)}")


def test_criterion_11_full_scale_optional():
    ACCEPTANCE_LINES.append("[SKIP] criterion 11: full-scale run (optional, overnight; recipes bs_full, cross_pde_full)")
    pytest.skip("full-scale reproduction is a documented overnight run, not part of the gate")
