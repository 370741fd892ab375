"""Recipe loading and the end-to-end experiment drivers."""

from __future__ import annotations

import copy
import csv
import json
import logging
import time
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path

import jsonschema
import numpy as np

from . import metrics as M
from .errors import ConfigError, DivergenceError
from .io import file_sha256, save_checkpoint, write_json
from .net import LayerSpec, MlpNetwork, mac_count
from .perf import measure_latency, speedup_ratio
from .problems import make_problem
from .sampling import ood_regions
from .training import LossWeights, Probe, TrainConfig, distill_student, train_teacher, write_history

log = logging.getLogger(__name__)

SCHEMA_VERSION = 1
OOD_VARIANTS = ("baseline", "kd_pinn_plus")


# ---- recipes ---------------------------------------------------------------

def recipe_schema() -> dict:
    return json.loads(resources.files("kdpinn").joinpath("schema/recipe.schema.json").read_text())


def list_recipes() -> list[str]:
    folder = resources.files("kdpinn").joinpath("recipes")
    return sorted(p.name[:-5] for p in folder.iterdir() if p.name.endswith(".json"))


def validate_recipe(doc: dict) -> dict:
    if doc.get("schema_version") != SCHEMA_VERSION:
        raise ConfigError(f"recipe schema_version must be {SCHEMA_VERSION}, got {doc.get('schema_version')!r}")
    try:
        jsonschema.validate(doc, recipe_schema())
    except jsonschema.ValidationError as exc:
        where = ".".join(str(p) for p in exc.absolute_path) or "<root>"
        raise ConfigError(f"invalid recipe at {where}: {exc.message}") from None
    return doc


def load_recipe(name_or_path) -> dict:
    """A bundled recipe name (e.g. ``bs_desk``) or a path to a JSON file."""
    path = Path(str(name_or_path))
    if path.suffix == ".json" or path.exists():
        if not path.exists():
            raise ConfigError(f"recipe file not found: {path}")
        text = path.read_text()
    else:
        if str(name_or_path) not in list_recipes():
            raise ConfigError(f"unknown recipe {name_or_path!r}; bundled: {list_recipes()}")
        text = resources.files("kdpinn").joinpath(f"recipes/{name_or_path}.json").read_text()
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"recipe {name_or_path} is not valid JSON: {exc}") from None
    return validate_recipe(doc)


def _leaf_keys(doc, prefix="") -> list[str]:
    out = []
    for k, v in doc.items():
        key = f"{prefix}{k}"
        if isinstance(v, dict) and v:
            out.extend(_leaf_keys(v, key + "."))
        else:
            out.append(key)
    return out


def _parse_value(text: str):
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        return text


def apply_overrides(doc: dict, overrides) -> dict:
    """Apply ``dotted.key=value`` overrides; unknown keys are rejected."""
    doc = copy.deepcopy(doc)
    valid = _leaf_keys(doc)
    for item in overrides or ():
        if "=" not in item:
            raise ConfigError(f"override {item!r} is not of the form key=value")
        key, raw = item.split("=", 1)
        key = key.strip()
        parts = key.split(".")
        node = doc
        for p in parts[:-1]:
            node = node.get(p) if isinstance(node, dict) else None
            if not isinstance(node, dict):
                break
        # a known leaf, or a new optional key inside a train block
        optional_train = (len(parts) >= 2 and parts[-2] in ("train", "teacher_train", "student_train")
                          and parts[-1] in TrainConfig.__dataclass_fields__)
        if not isinstance(node, dict) or (key not in valid and not optional_train):
            raise ConfigError(f"unknown recipe key {key!r}; valid keys: {', '.join(valid)}")
        node[parts[-1]] = _parse_value(raw)
    return validate_recipe(doc)


def train_config(block: dict, weights: dict, seed: int, **extra) -> TrainConfig:
    d = dict(block)
    d.setdefault("seed", seed)
    w = dict(weights)
    w.update({k: extra.pop(k) for k in list(extra) if k in LossWeights.__dataclass_fields__})
    d.update(extra)
    d["weights"] = LossWeights(**w)
    return TrainConfig.from_dict(d)


def student_variant_config(recipe: dict, variant: str, seed: int, block_key: str = "student") -> TrainConfig:
    block = recipe[block_key]["train"]
    if variant == "baseline":
        return train_config(block, recipe["weights"], seed)
    if variant == "kd_pinn_plus":
        m = recipe.get("mitigations", {})
        return train_config(block, recipe["weights"], seed, kd_huber=m.get("kd_huber", True),
                            curriculum_fraction=m.get("curriculum_fraction", 0.2),
                            informed_eta=m.get("informed_eta", 0.75))
    raise ConfigError(f"unknown variant {variant!r}; choose from {OOD_VARIANTS}")


# ---- run plumbing ----------------------------------------------------------

def make_run_dir(root, name: str, seed: int) -> Path:
    stamp = time.strftime("%Y%m%d-%H%M%S")
    path = Path(root) / f"{name}-s{seed}-{stamp}"
    k = 1
    while path.exists():
        path = Path(root) / f"{name}-s{seed}-{stamp}-{k}"
        k += 1
    path.mkdir(parents=True)
    return path


@dataclass
class RunResult:
    doc: dict
    out_dir: Path
    nets: dict = field(default_factory=dict)
    histories: dict = field(default_factory=dict)


def _save_net(out_dir: Path, label: str, net: MlpNetwork, seed: int, meta: dict, checkpoints: dict) -> Path:
    path = save_checkpoint(out_dir / f"{label}.ckpt.json", net, seed, meta)
    checkpoints[label] = {"path": path.name, "sha256": file_sha256(path)}
    return path


def _write_probe_csv(path: Path, histories: dict) -> None:
    with path.open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["stage", "iter", "rmse"])
        for stage, hist in histories.items():
            for h in hist:
                if np.isfinite(h.rmse_probe):
                    w.writerow([stage, h.iteration, repr(h.rmse_probe)])


def kd_decay(history, at: int = 500) -> dict:
    """L_kd at iteration 1 and iteration ``at`` (1-based) and their ratio."""
    first = history[0].l_kd
    idx = min(at, len(history)) - 1
    later = history[idx].l_kd
    return {"iteration": idx + 1, "l_kd_first": first, "l_kd_at": later,
            "ratio": first / later if later > 0 else float("inf")}


def fit_teacher(recipe: dict, seed: int, out_dir: Path | None = None, probe: Probe | None = None):
    problem = make_problem(recipe["problem"], **recipe.get("problem_params", {}))
    spec = LayerSpec.from_dict(recipe["teacher"]["spec"])
    cfg = train_config(recipe["teacher"]["train"], recipe["weights"], seed)
    net, hist = train_teacher(problem, spec, cfg, probe)
    if out_dir is not None:
        write_history(out_dir / "teacher_loss.csv", hist)
    return net, hist


def _latency_pair(a: MlpNetwork, b: MlpNetwork, plan: dict, ids=("teacher", "student")):
    ra = measure_latency(a, plan["batch"], plan["warmup"], plan["runs"], ids[0])
    rb = measure_latency(b, plan["batch"], plan["warmup"], plan["runs"], ids[1])
    return ra, rb, speedup_ratio(ra, rb)


def _strip_times(report) -> dict:
    d = report.to_dict()
    d.pop("times_ms")
    return d


# ---- Black-Scholes in-domain -----------------------------------------------

def run_in_domain_bs(recipe: dict, out_root, seed: int | None = None, teacher: MlpNetwork | None = None,
                     teacher_history=None, measure: bool = True) -> RunResult:
    seed = recipe["seed"] if seed is None else seed
    out = make_run_dir(out_root, recipe["name"] + "-in_domain", seed)
    problem = make_problem(recipe["problem"], **recipe.get("problem_params", {}))
    probe = Probe.for_problem(problem, recipe.get("evaluation", {}).get("resolution"))
    histories = {}
    if teacher is None:
        teacher, teacher_history = fit_teacher(recipe, seed, out, probe)
    elif teacher_history is not None:
        write_history(out / "teacher_loss.csv", teacher_history)
    if teacher_history is not None:
        histories["teacher"] = teacher_history
    s_spec = LayerSpec.from_dict(recipe["student"]["spec"])
    s_cfg = student_variant_config(recipe, "baseline", seed)
    student, s_hist = distill_student(problem, teacher, s_spec, s_cfg, probe)
    histories["student"] = s_hist
    write_history(out / "student_loss.csv", s_hist)
    _write_probe_csv(out / "rmse_probe.csv", histories)

    checkpoints = {}
    _save_net(out, "teacher", teacher, seed, {"problem": problem.name, "role": "teacher"}, checkpoints)
    _save_net(out, "student", student, seed, {"problem": problem.name, "role": "student"}, checkpoints)

    pts, ref = probe.points, probe.ref
    pred_t, pred_s = M.predict(teacher, pts), M.predict(student, pts)
    acc_t, acc_s = M.accuracy(pred_t, ref), M.accuracy(pred_s, ref)
    err_t, err_s = (pred_t - ref).ravel(), (pred_s - ref).ravel()
    rho, r2 = M.residual_correlation(err_t, err_s)
    M.write_error_field(out / "teacher_error_field.csv", pts, pred_t, ref, problem.domain.names)
    M.write_error_field(out / "student_error_field.csv", pts, pred_s, ref, problem.domain.names)
    doc = {
        "experiment": "in_domain_bs",
        "recipe": recipe,
        "seed": seed,
        "checkpoints": checkpoints,
        "teacher": acc_t.to_dict(),
        "student": acc_s.to_dict(),
        "residual_correlation": {"rho": rho, "r2_abs": r2},
        "calibration_r2": M.calibration_r2(pred_s, ref),
        "kd_decay": kd_decay(s_hist),
        "mac_ratio": mac_count(teacher.spec) / mac_count(student.spec),
    }
    if measure:
        rt, rs, ratio = _latency_pair(teacher, student, recipe["latency"])
        doc["latency"] = {"teacher": rt.to_dict(), "student": rs.to_dict(), "speedup": ratio}
    write_json(out / "results.json", doc)
    return RunResult(doc, out, {"teacher": teacher, "student": student}, histories)


# ---- OOD suite ---------------------------------------------------------------

def _distance_grid(recipe) -> np.ndarray:
    ev = recipe.get("evaluation", {})
    n_s, n_t = ev.get("distance_grid", [500, 100])
    from .problems.base import DomainBox
    return DomainBox((0.0, 0.0), (5.0, 1.0), ("S", "t"), time_axis=1).grid(n_s, n_t)


def ood_table(problem, teacher: MlpNetwork, students: dict[str, MlpNetwork]) -> dict:
    """Per-region teacher/student accuracy and student/teacher RMSE ratios."""
    rows = []
    pooled = {k: [] for k in ["ref", "teacher", *students]}
    for region in ood_regions():
        pts = region.grid()
        ref = problem.reference(pts)
        pt = M.predict(teacher, pts)
        row = {"region": region.name, "box": region.box.to_dict(), "resolution": list(region.resolution),
               "teacher": M.accuracy(pt, ref).to_dict()}
        pooled["ref"].append(ref)
        pooled["teacher"].append(pt)
        for name, net in students.items():
            ps = M.predict(net, pts)
            acc = M.accuracy(ps, ref)
            row[name] = acc.to_dict()
            row[f"{name}_ratio"] = acc.rmse / row["teacher"]["rmse"]
            pooled[name].append(ps)
        rows.append(row)
    ref = np.concatenate(pooled["ref"])
    agg = {"teacher": M.accuracy(np.concatenate(pooled["teacher"]), ref).to_dict()}
    for name in students:
        acc = M.accuracy(np.concatenate(pooled[name]), ref)
        agg[name] = acc.to_dict()
        agg[f"{name}_ratio"] = acc.rmse / agg["teacher"]["rmse"]
    return {"regions": rows, "aggregate": agg}


def _write_distance_csv(path, recipe, problem, nets: dict) -> None:
    grid = _distance_grid(recipe)
    ref = problem.reference(grid).ravel()
    dist = M.dist_linf_to_box(grid, problem.domain)
    n_bins = recipe.get("evaluation", {}).get("distance_bins", 20)
    bins = {k: M.error_vs_distance(M.predict(n, grid).ravel() - ref, dist, n_bins) for k, n in nets.items()}
    with Path(path).open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["bin_lo", "bin_hi", "count", *(f"median_abs_error_{k}" for k in nets)])
        first = next(iter(bins.values()))
        for b in range(n_bins):
            w.writerow([repr(float(first.edges[b])), repr(float(first.edges[b + 1])), int(first.counts[b]),
                        *(repr(float(bins[k].median_abs_error[b])) for k in nets)])


def _write_cdf_csv(path, problem, nets: dict, levels: int) -> None:
    with Path(path).open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["region", "model", "probability", "abs_error"])
        for region in ood_regions():
            pts = region.grid()
            ref = problem.reference(pts).ravel()
            for k, n in nets.items():
                q, p = M.abs_error_cdf(M.predict(n, pts).ravel() - ref, levels)
                for a, b in zip(p, q):
                    w.writerow([region.name, k, repr(float(a)), repr(float(b))])


def run_ood_suite(recipe: dict, out_root, seed: int | None = None, teacher: MlpNetwork | None = None,
                  variants=OOD_VARIANTS, students: dict | None = None) -> RunResult:
    """Distill one student per variant from a shared teacher and tabulate the OOD regions."""
    seed = recipe["seed"] if seed is None else seed
    out = make_run_dir(out_root, recipe["name"] + "-ood", seed)
    problem = make_problem(recipe["problem"], **recipe.get("problem_params", {}))
    checkpoints = {}
    if teacher is None:
        teacher, _ = fit_teacher(recipe, seed, out)
    _save_net(out, "teacher", teacher, seed, {"problem": problem.name, "role": "teacher"}, checkpoints)
    students = dict(students or {})
    histories = {}
    s_spec = LayerSpec.from_dict(recipe["student"]["spec"])
    for v in variants:
        if v not in students:
            students[v], histories[v] = distill_student(problem, teacher, s_spec, student_variant_config(recipe, v, seed))
            write_history(out / f"student_{v}_loss.csv", histories[v])
        _save_net(out, f"student_{v}", students[v], seed, {"problem": problem.name, "role": "student", "variant": v},
                  checkpoints)
    table = ood_table(problem, teacher, students)
    if len(variants) == 2:
        a, b = variants
        table["improved_regions"] = [r["region"] for r in table["regions"] if r[f"{b}_ratio"] < r[f"{a}_ratio"]]
    nets = {"teacher": teacher, **students}
    _write_distance_csv(out / "error_vs_distance.csv", recipe, problem, nets)
    _write_cdf_csv(out / "abs_error_cdf.csv", problem, nets, recipe.get("evaluation", {}).get("cdf_levels", 200))
    doc = {"experiment": "ood_suite", "recipe": recipe, "seed": seed, "variants": list(variants),
           "checkpoints": checkpoints, **table}
    write_json(out / "results.json", doc)
    return RunResult(doc, out, nets, histories)


# ---- identical-architecture ablation ----------------------------------------

def run_equal_arch_ablation(recipe: dict, out_root, seed: int | None = None, teacher: MlpNetwork | None = None,
                            measure: bool = True) -> RunResult:
    """Two same-spec students, with and without the distillation term."""
    seed = recipe["seed"] if seed is None else seed
    out = make_run_dir(out_root, recipe["name"] + "-ablation", seed)
    problem = make_problem(recipe["problem"], **recipe.get("problem_params", {}))
    if teacher is None:
        teacher, _ = fit_teacher(recipe, seed, out)
    block = recipe.get("ablation_student") or {"spec": recipe["teacher"]["spec"], "train": recipe["student"]["train"]}
    spec = LayerSpec.from_dict(block["spec"])
    pts = problem.domain.grid(*recipe.get("evaluation", {}).get("resolution", problem.eval_resolution))
    ref = problem.reference(pts)
    nets, hist, acc, checkpoints = {}, {}, {}, {}
    for label, w_kd in (("distilled", recipe["weights"]["w_kd"]), ("plain", 0.0)):
        cfg = train_config(block["train"], recipe["weights"], seed, w_kd=w_kd)
        nets[label], hist[label] = distill_student(problem, teacher, spec, cfg)
        write_history(out / f"student_{label}_loss.csv", hist[label])
        acc[label] = M.evaluate(nets[label], problem, pts, ref)
        _save_net(out, f"student_{label}", nets[label], seed, {"problem": problem.name, "w_kd": w_kd}, checkpoints)
    doc = {"experiment": "equal_arch_ablation", "recipe": recipe, "seed": seed, "checkpoints": checkpoints,
           "spec": spec.to_dict(), "mac_counts": {k: mac_count(n.spec) for k, n in nets.items()},
           "accuracy": {k: a.to_dict() for k, a in acc.items()},
           "rmse_improvement": 1.0 - acc["distilled"].rmse / acc["plain"].rmse}
    if measure:
        rd, rp, ratio = _latency_pair(nets["distilled"], nets["plain"], recipe["latency"], ("distilled", "plain"))
        doc["latency"] = {"distilled": rd.to_dict(), "plain": rp.to_dict(),
                          "relative_delta": abs(rd.median_ms - rp.median_ms) / min(rd.median_ms, rp.median_ms)}
    write_json(out / "results.json", doc)
    return RunResult(doc, out, nets, hist)


# ---- cross-PDE suite -------------------------------------------------------

def _slice_points(problem) -> tuple[str, np.ndarray]:
    box = problem.domain
    x = np.linspace(box.lo[0], box.hi[0], 201)
    if problem.name == "navier_stokes":
        return "y=pi/2,t=0.5", np.stack([x, np.full_like(x, np.pi / 2), np.full_like(x, 0.5)], axis=1)
    return "t=0.25", np.stack([x, np.full_like(x, 0.25)], axis=1)


def _write_slice(path, problem, teacher, student) -> None:
    label, pts = _slice_points(problem)
    ref = problem.reference(pts)
    pt, ps = M.predict(teacher, pts), M.predict(student, pts)
    if problem.gauge_outputs:
        ref, pt, ps = (M.remove_gauge(a, pts, None, problem.gauge_outputs) for a in (ref, pt, ps))
    names = problem.output_names
    with Path(path).open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["slice", problem.domain.names[0], *(f"{m}_{n}" for m in ("ref", "teacher", "student")
                                                        for n in names)])
        for i in range(len(pts)):
            w.writerow([label, repr(float(pts[i, 0])), *(repr(float(v)) for v in (*ref[i], *pt[i], *ps[i]))])


def run_cross_pde(recipe: dict, out_root, seed: int | None = None, measure: bool = True, rows=None) -> RunResult:
    """One teacher/student pair per row; a failing row is recorded and skipped."""
    seed = recipe["seed"] if seed is None else seed
    out = make_run_dir(out_root, recipe["name"], seed)
    teachers: dict[str, MlpNetwork] = {}
    results, nets, checkpoints = [], {}, {}
    for row in recipe["rows"]:
        label = row["label"]
        if rows is not None and label not in rows:
            continue
        entry = {"label": label, "problem": row["problem"]}
        try:
            problem = make_problem(row["problem"], **row.get("problem_params", {}))
            shared = row.get("share_teacher_with")
            if shared and shared in teachers:
                teacher = teachers[shared]
            else:
                cfg = train_config(recipe["teacher_train"], recipe["weights"], seed)
                teacher, th = train_teacher(problem, LayerSpec.from_dict(row["teacher"]), cfg)
                write_history(out / f"{label}_teacher_loss.csv", th)
            teachers[label] = teacher
            s_cfg = train_config(recipe["student_train"], recipe["weights"], seed, tau=row.get("tau", 1.25))
            student, sh = distill_student(problem, teacher, LayerSpec.from_dict(row["student"]), s_cfg)
            write_history(out / f"{label}_student_loss.csv", sh)
            pts = problem.domain.grid(*problem.eval_resolution)
            ref = problem.reference(pts)
            entry["rmse_teacher"] = M.evaluate(teacher, problem, pts, ref).rmse
            entry["rmse_student"] = M.evaluate(student, problem, pts, ref).rmse
            entry["rel_l2_teacher"] = M.evaluate(teacher, problem, pts, ref).rel_l2
            entry["rel_l2_student"] = M.evaluate(student, problem, pts, ref).rel_l2
            entry["mac_ratio"] = mac_count(teacher.spec) / mac_count(student.spec)
            _write_slice(out / f"{label}_slice.csv", problem, teacher, student)
            _save_net(out, f"{label}_teacher", teacher, seed, {"problem": problem.name, "role": "teacher"}, checkpoints)
            _save_net(out, f"{label}_student", student, seed, {"problem": problem.name, "role": "student"}, checkpoints)
            if measure:
                rt, rs, ratio = _latency_pair(teacher, student, recipe["latency"])
                entry.update(latency_teacher_ms=rt.median_ms, latency_student_ms=rs.median_ms, speedup=ratio)
            nets[label] = (teacher, student)
        except (DivergenceError, ConfigError, ValueError, FloatingPointError) as exc:
            log.warning("cross-PDE row %s failed: %s", label, exc)
            entry["error"] = f"{type(exc).__name__}: {exc}"
        results.append(entry)
    doc = {"experiment": "cross_pde", "recipe": recipe, "seed": seed, "checkpoints": checkpoints, "rows": results}
    write_json(out / "results.json", doc)
    return RunResult(doc, out, nets)
