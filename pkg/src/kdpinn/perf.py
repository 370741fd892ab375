"""Single-thread CPU latency harness and analytic speedup bounds."""

from __future__ import annotations

import os
import platform
import statistics
import time
from dataclasses import asdict, dataclass, field

import numpy as np
import torch

from .errors import ConfigError, EnvironmentRefused
from .net import MlpNetwork, mac_count

CLOCK_RESOLUTION_LIMIT = 1e-6


def cpu_model() -> str:
    try:
        with open("/proc/cpuinfo") as fh:
            for line in fh:
                if line.startswith("model name"):
                    return line.split(":", 1)[1].strip()
    except OSError:
        pass
    return platform.processor() or platform.machine()


def environment_fingerprint() -> dict:
    return {
        "threads": torch.get_num_threads(),
        "interop_threads": torch.get_num_interop_threads(),
        "logical_cores": os.cpu_count(),
        "cpu_model": cpu_model(),
        "torch": torch.__version__,
        "python": platform.python_version(),
        "build_note": "float64 tensors, eager mode, no compilation",
    }


def pin_single_thread() -> None:
    """Force one intra-op thread or refuse."""
    try:
        torch.set_num_threads(1)
    except RuntimeError as exc:
        raise EnvironmentRefused(f"could not pin worker count to 1: {exc}") from exc
    if torch.get_num_threads() != 1:
        raise EnvironmentRefused(f"thread pinning failed: torch reports {torch.get_num_threads()} threads")


def check_clock() -> float:
    res = time.get_clock_info("perf_counter").resolution
    if res > CLOCK_RESOLUTION_LIMIT:
        raise EnvironmentRefused(f"perf_counter resolution {res:g}s is coarser than 1 us")
    return res


@dataclass
class LatencyReport:
    model_id: str
    batch: int
    warmup: int
    runs: int
    times_ms: list[float]
    median_ms: float
    mean_ms: float
    environment: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return asdict(self)


def uniform_inputs(lo, hi, n: int, seed: int = 0) -> np.ndarray:
    rng = np.random.default_rng(seed)
    lo, hi = np.asarray(lo, dtype=float), np.asarray(hi, dtype=float)
    return lo + (hi - lo) * rng.random((n, lo.size))


def measure_latency(net: MlpNetwork, batch: int = 20000, warmup: int = 20, runs: int = 100,
                    model_id: str = "net", seed: int = 0) -> LatencyReport:
    """Median wall time of one forward pass over `batch` uniform inputs, single-threaded."""
    if batch < 1 or runs < 1 or warmup < 0:
        raise ConfigError("batch and runs must be >= 1, warmup >= 0")
    pin_single_thread()
    check_clock()
    x = torch.from_numpy(uniform_inputs(net.lo.numpy(), net.hi.numpy(), batch, seed))
    z = net.scale(x)  # input scaling stays outside the timed region
    times = []
    with torch.inference_mode():
        for _ in range(warmup):
            net.forward_scaled(z)
        for _ in range(runs):
            t0 = time.perf_counter()
            net.forward_scaled(z)
            times.append((time.perf_counter() - t0) * 1e3)
    return LatencyReport(model_id, batch, warmup, runs, times, statistics.median(times), statistics.fmean(times),
                         environment_fingerprint())


def speedup_ratio(teacher: LatencyReport, student: LatencyReport) -> float:
    if teacher.batch != student.batch:
        raise ConfigError("latency reports use different batch sizes")
    if teacher.environment != student.environment:
        raise EnvironmentRefused("latency reports come from different environments")
    return teacher.median_ms / student.median_ms


def amdahl_bound(r_flops: float, f: float) -> float:
    if r_flops < 1:
        raise ValueError("r_flops must be >= 1")
    if not 0.0 <= f < 1.0:
        raise ValueError("serial fraction f must lie in [0, 1)")
    return 1.0 / (f + (1.0 - f) / r_flops)


def roofline_factor(ai_s: float, ai_t: float, bw: float, p_peak: float) -> float:
    """Attainable-performance ratio student/teacher under the roofline model."""
    if min(ai_s, ai_t, bw, p_peak) <= 0:
        raise ValueError("roofline inputs must be positive")
    return min(p_peak, ai_s * bw) / min(p_peak, ai_t * bw)


def combined_bound(r_flops: float, f: float, factor: float) -> float:
    return min(r_flops, amdahl_bound(r_flops, f), r_flops * min(1.0, factor))


@dataclass
class SpeedupBounds:
    r_flops: float
    f: float
    ai_teacher: float
    ai_student: float
    bw: float
    p_peak: float
    amdahl_bound: float
    roofline_factor: float
    s_max: float
    degenerate: bool = False

    def to_dict(self) -> dict:
        return asdict(self)


def speedup_bounds(teacher_spec, student_spec, f: float = 0.02, ai_teacher: float = 0.1, ai_student: float = 0.1,
                   bw: float = 20e9, p_peak: float = 50e9) -> SpeedupBounds:
    """Bounds for a spec pair; AI, bandwidth and peak are user-supplied hardware figures."""
    r = mac_count(teacher_spec) / mac_count(student_spec)
    factor = roofline_factor(ai_student, ai_teacher, bw, p_peak)
    s_max = combined_bound(r, f, factor)
    return SpeedupBounds(r, f, ai_teacher, ai_student, bw, p_peak, amdahl_bound(r, f), factor, s_max,
                         degenerate=s_max == 0.0)
