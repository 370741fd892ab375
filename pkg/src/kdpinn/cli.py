"""kdpinn command line: train, distill, evaluate, benchmark and run experiment suites."""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from pathlib import Path

import torch

from . import experiments as E
from . import metrics as M
from .errors import ChecksumError, ConfigError, DivergenceError, EnvironmentRefused
from .io import file_sha256, load_checkpoint, save_checkpoint, write_json, _jsonable
from .net import LayerSpec, init_xavier
from .perf import measure_latency, speedup_bounds, speedup_ratio, combined_bound, amdahl_bound
from .problems import make_problem
from .training import distill_student, train_teacher, write_history

EXIT_OK, EXIT_CONFIG, EXIT_DIVERGENCE, EXIT_ENV = 0, 2, 3, 4

log = logging.getLogger("kdpinn")


def _emit(doc: dict) -> None:
    print(json.dumps(_jsonable(doc), indent=2, sort_keys=True))


def _recipe(args) -> dict:
    recipe = E.load_recipe(args.recipe)
    if args.set:
        recipe = E.apply_overrides(recipe, args.set)
    if args.seed is not None:
        recipe["seed"] = args.seed
    return recipe


def _spec(text: str) -> LayerSpec:
    try:
        return LayerSpec(tuple(int(s) for s in text.split(",")))
    except ValueError as exc:
        raise ConfigError(f"bad layer spec {text!r}: expected comma-separated sizes") from exc


def _save_partial(out: Path, label: str, exc: DivergenceError, seed: int) -> None:
    if exc.net is not None:
        save_checkpoint(out / f"{label}.partial.ckpt.json", exc.net, seed, {"partial": True, "error": str(exc)})
    if exc.history:
        write_history(out / f"{label}_loss.partial.csv", exc.history)


def cmd_train_teacher(args) -> int:
    recipe = _recipe(args)
    seed = recipe["seed"]
    problem = make_problem(recipe["problem"], **recipe.get("problem_params", {}))
    out = E.make_run_dir(args.out, recipe["name"] + "-teacher", seed)
    cfg = E.train_config(recipe["teacher"]["train"], recipe["weights"], seed)
    try:
        net, hist = train_teacher(problem, LayerSpec.from_dict(recipe["teacher"]["spec"]), cfg)
    except DivergenceError as exc:
        _save_partial(out, "teacher", exc, seed)
        raise
    write_history(out / "teacher_loss.csv", hist)
    path = save_checkpoint(out / "teacher.ckpt.json", net, seed,
                           {"problem": problem.name, "role": "teacher", "recipe": recipe})
    write_json(out / "results.json", {"experiment": "train_teacher", "recipe": recipe, "seed": seed,
                                      "checkpoints": {"teacher": {"path": path.name, "sha256": file_sha256(path)}},
                                      "final_total": hist[-1].total, "best_total": min(h.total for h in hist)})
    print(path)
    return EXIT_OK


def _check_problem(payload: dict, problem_name: str, what: str) -> None:
    meta_problem = payload.get("training_meta", {}).get("problem")
    if meta_problem is not None and meta_problem != problem_name:
        raise ConfigError(f"{what} was trained on {meta_problem!r} but the recipe is for {problem_name!r}")


def cmd_distill(args) -> int:
    recipe = _recipe(args)
    seed = recipe["seed"]
    problem = make_problem(recipe["problem"], **recipe.get("problem_params", {}))
    teacher, payload = load_checkpoint(args.teacher)
    _check_problem(payload, problem.name, f"teacher checkpoint {args.teacher}")
    out = E.make_run_dir(args.out, recipe["name"] + "-student", seed)
    cfg = E.student_variant_config(recipe, args.variant, seed)
    try:
        net, hist = distill_student(problem, teacher, LayerSpec.from_dict(recipe["student"]["spec"]), cfg)
    except DivergenceError as exc:
        _save_partial(out, "student", exc, seed)
        raise
    write_history(out / "student_loss.csv", hist)
    path = save_checkpoint(out / "student.ckpt.json", net, seed,
                           {"problem": problem.name, "role": "student", "variant": args.variant, "recipe": recipe,
                            "teacher_sha256": file_sha256(args.teacher)})
    print(path)
    return EXIT_OK


def _problem_for(args, payload: dict):
    name = args.problem or payload.get("training_meta", {}).get("problem")
    if name is None:
        raise ConfigError("checkpoint has no problem metadata; pass --problem")
    return make_problem(name)


def cmd_evaluate(args) -> int:
    docs = {}
    for ckpt in args.checkpoint:
        net, payload = load_checkpoint(ckpt)
        problem = _problem_for(args, payload)
        pts = problem.domain.grid(*problem.eval_resolution)
        docs[Path(ckpt).name] = {"problem": problem.name, "sha256": file_sha256(ckpt),
                                 "accuracy": M.evaluate(net, problem, pts).to_dict(),
                                 "resolution": list(problem.eval_resolution)}
    doc = {"experiment": "evaluate", "checkpoints": docs}
    if args.output:
        write_json(args.output, doc)
    _emit(doc)
    return EXIT_OK


def cmd_ood(args) -> int:
    recipe = _recipe(args)
    students = {}
    teacher = None
    if args.teacher:
        teacher, payload = load_checkpoint(args.teacher)
        _check_problem(payload, recipe["problem"], "teacher checkpoint")
    for item in args.student or ():
        name, _, path = item.partition("=")
        if not path:
            raise ConfigError(f"--student expects name=path, got {item!r}")
        students[name], _ = load_checkpoint(path)
    variants = tuple(students) if students else E.OOD_VARIANTS
    res = E.run_ood_suite(recipe, args.out, teacher=teacher, variants=variants, students=students)
    _emit({"out_dir": str(res.out_dir), "regions": res.doc["regions"], "aggregate": res.doc["aggregate"],
           "improved_regions": res.doc.get("improved_regions")})
    return EXIT_OK


def cmd_bench(args) -> int:
    nets = []
    if args.checkpoint:
        for c in args.checkpoint:
            net, _ = load_checkpoint(c)
            nets.append((Path(c).name, net))
    else:
        recipe = _recipe(args)
        problem = make_problem(recipe["problem"], **recipe.get("problem_params", {}))
        for role in ("teacher", "student"):
            spec = LayerSpec.from_dict(recipe[role]["spec"])
            nets.append((role, init_xavier(spec, recipe["seed"], problem.domain.lo, problem.domain.hi)))
    reports = [measure_latency(n, args.batch, args.warmup, args.runs, name) for name, n in nets]
    doc = {"experiment": "bench", "reports": [r.to_dict() for r in reports]}
    if len(reports) == 2:
        doc["speedup"] = speedup_ratio(*reports)
    if args.output:
        write_json(args.output, doc)
    _emit(doc)
    return EXIT_OK


def cmd_bounds(args) -> int:
    t, s = _spec(args.teacher_spec), _spec(args.student_spec)
    b = speedup_bounds(t, s, args.f, args.ai_teacher, args.ai_student, args.bw, args.p_peak)
    doc = b.to_dict()
    if args.r_flops is not None:
        doc.update(r_flops=args.r_flops, amdahl_bound=amdahl_bound(args.r_flops, args.f),
                   s_max=combined_bound(args.r_flops, args.f, b.roofline_factor))
    _emit({"experiment": "bounds", "teacher_spec": list(t.sizes), "student_spec": list(s.sizes), **doc})
    return EXIT_OK


def cmd_cross_pde(args) -> int:
    res = E.run_cross_pde(_recipe(args), args.out, measure=not args.no_latency, rows=args.rows)
    _emit({"out_dir": str(res.out_dir), "rows": res.doc["rows"]})
    return EXIT_OK


def cmd_ablation(args) -> int:
    recipe = _recipe(args)
    teacher = None
    if args.teacher:
        teacher, payload = load_checkpoint(args.teacher)
        _check_problem(payload, recipe["problem"], "teacher checkpoint")
    res = E.run_equal_arch_ablation(recipe, args.out, teacher=teacher, measure=not args.no_latency)
    _emit({"out_dir": str(res.out_dir), "accuracy": res.doc["accuracy"], "latency": res.doc.get("latency")})
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="kdpinn", description=__doc__)
    p.add_argument("-v", "--verbose", action="count", default=0)
    sub = p.add_subparsers(dest="command", required=True)

    def recipe_args(sp, required=True):
        sp.add_argument("--recipe", required=required, help="bundled recipe name or path to a JSON recipe")
        sp.add_argument("--set", action="append", metavar="KEY=VALUE", help="override a recipe field (dotted path)")
        sp.add_argument("--seed", type=int)
        sp.add_argument("--out", default="results", help="results root directory")

    sp = sub.add_parser("train-teacher", help="pretrain a teacher")
    recipe_args(sp)
    sp.set_defaults(func=cmd_train_teacher)

    sp = sub.add_parser("distill", help="distill a student from a teacher checkpoint")
    recipe_args(sp)
    sp.add_argument("--teacher", required=True)
    sp.add_argument("--variant", choices=E.OOD_VARIANTS, default="baseline")
    sp.set_defaults(func=cmd_distill)

    sp = sub.add_parser("evaluate", help="accuracy of checkpoints on the problem's evaluation grid")
    sp.add_argument("checkpoint", nargs="+")
    sp.add_argument("--problem")
    sp.add_argument("--output")
    sp.set_defaults(func=cmd_evaluate)

    sp = sub.add_parser("ood", help="out-of-domain region suite")
    recipe_args(sp)
    sp.add_argument("--teacher")
    sp.add_argument("--student", action="append", metavar="NAME=PATH")
    sp.set_defaults(func=cmd_ood)

    sp = sub.add_parser("bench", help="single-thread latency of checkpoints or recipe specs")
    recipe_args(sp, required=False)
    sp.add_argument("--checkpoint", action="append")
    sp.add_argument("--batch", type=int, default=20000)
    sp.add_argument("--warmup", type=int, default=20)
    sp.add_argument("--runs", type=int, default=100)
    sp.add_argument("--output")
    sp.set_defaults(func=cmd_bench)

    sp = sub.add_parser("bounds", help="Amdahl/roofline speedup bounds (pure arithmetic)")
    sp.add_argument("--teacher-spec", default="2,50,50,50,1")
    sp.add_argument("--student-spec", default="2,20,20,20,1")
    sp.add_argument("--r-flops", type=float, help="override the MAC ratio derived from the specs")
    sp.add_argument("--f", type=float, default=0.02, help="non-accelerable runtime fraction")
    sp.add_argument("--ai-teacher", type=float, default=0.1)
    sp.add_argument("--ai-student", type=float, default=0.1)
    sp.add_argument("--bw", type=float, default=20e9, help="memory bandwidth, bytes/s")
    sp.add_argument("--p-peak", type=float, default=50e9, help="peak compute, FLOP/s")
    sp.set_defaults(func=cmd_bounds)

    sp = sub.add_parser("cross-pde", help="Burgers / Allen-Cahn / Navier-Stokes suite")
    recipe_args(sp)
    sp.add_argument("--rows", nargs="*")
    sp.add_argument("--no-latency", action="store_true")
    sp.set_defaults(func=cmd_cross_pde)

    sp = sub.add_parser("ablation", help="identical-architecture students with and without distillation")
    recipe_args(sp)
    sp.add_argument("--teacher")
    sp.add_argument("--no-latency", action="store_true")
    sp.set_defaults(func=cmd_ablation)
    return p


def _apply_thread_env() -> None:
    value = os.environ.get("KDPINN_THREADS")
    if value:
        try:
            n = int(value)
        except ValueError:
            raise ConfigError(f"KDPINN_THREADS must be an integer, got {value!r}") from None
        if n < 1:
            raise ConfigError("KDPINN_THREADS must be >= 1")
        torch.set_num_threads(n)


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.WARNING - 10 * min(args.verbose, 2), format="%(levelname)s %(name)s: %(message)s")
    try:
        _apply_thread_env()
        return args.func(args)
    except (ConfigError, ChecksumError) as exc:
        print(f"kdpinn: error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except DivergenceError as exc:
        print(f"kdpinn: diverged: {exc}", file=sys.stderr)
        return EXIT_DIVERGENCE
    except EnvironmentRefused as exc:
        print(f"kdpinn: refused: {exc}", file=sys.stderr)
        return EXIT_ENV


if __name__ == "__main__":
    sys.exit(main())
