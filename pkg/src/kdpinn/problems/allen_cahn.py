"""Allen-Cahn u_t - nu u_xx + u^3 - u = 0 on [-1,1] x [0,1].

The initial profile x^2 cos(pi x) equals -1 at both walls while the walls
are held at 0, so the reference solver uses the initial data at t = 0 and
the wall values for every t > 0.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy.interpolate import RectBivariateSpline
from scipy.linalg import cho_solve_banded, cholesky_banded

from .base import Constraint, DomainBox, Face, PdeProblem, ReferenceSolution, check_positive

DEFAULT_NU = 1e-3
ORACLE_FORMAT = 1


def initial_profile(x):
    x = np.asarray(x, dtype=float)
    return x * x * np.cos(np.pi * x)


def _reaction(u):
    return u - u**3


def crank_nicolson_ab2(nu: float, nx: int = 512, nt: int = 2000, t_end: float = 1.0):
    """Crank-Nicolson diffusion with second-order Adams-Bashforth reaction.

    Returns ``(x, t, U)`` with ``U[j, n] = u(x_j, t_n)``. The first step
    uses a Heun predictor for the reaction so the scheme stays second order.
    """
    x = np.linspace(-1.0, 1.0, nx)
    t = np.linspace(0.0, t_end, nt + 1)
    dx = x[1] - x[0]
    dt = t[1] - t[0]
    m = nx - 2
    lam = 0.5 * dt * nu / dx**2
    # upper banded form of I - lam * D2 (symmetric positive definite)
    ab = np.zeros((2, m))
    ab[0, 1:] = -lam
    ab[1, :] = 1.0 + 2.0 * lam
    chol = cholesky_banded(ab)

    def explicit_diffusion(v):
        out = (1.0 - 2.0 * lam) * v
        out[1:] += lam * v[:-1]
        out[:-1] += lam * v[1:]
        return out

    U = np.zeros((nx, nt + 1))
    U[:, 0] = initial_profile(x)
    u = U[1:-1, 0].copy()
    f_prev = _reaction(u)
    pred = cho_solve_banded((chol, False), explicit_diffusion(u) + dt * f_prev)
    u_next = cho_solve_banded((chol, False), explicit_diffusion(u) + 0.5 * dt * (f_prev + _reaction(pred)))
    U[1:-1, 1] = u_next
    u = u_next
    for n in range(1, nt):
        f = _reaction(u)
        u_new = cho_solve_banded((chol, False), explicit_diffusion(u) + dt * (1.5 * f - 0.5 * f_prev))
        f_prev = f
        u = u_new
        U[1:-1, n + 1] = u
    return x, t, U


@dataclass
class OracleGrid:
    x: np.ndarray
    t: np.ndarray
    U: np.ndarray
    meta: dict

    def __post_init__(self):
        self._spline = RectBivariateSpline(self.x, self.t, self.U, kx=3, ky=1)

    def __call__(self, xq, tq) -> np.ndarray:
        return self._spline.ev(np.asarray(xq, dtype=float), np.asarray(tq, dtype=float))

    def checksum(self) -> str:
        return hashlib.sha256(np.ascontiguousarray(self.U).tobytes()).hexdigest()

    def save(self, path) -> Path:
        """Write ``path`` (CSV of x,t,u) and ``path.json`` (grid metadata)."""
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        X, T = np.meshgrid(self.x, self.t, indexing="ij")
        data = np.column_stack([X.ravel(), T.ravel(), self.U.ravel()])
        np.savetxt(path, data, delimiter=",", header="x,t,u", comments="", fmt="%.17g")
        meta = dict(self.meta, format_version=ORACLE_FORMAT, shape=list(self.U.shape),
                    checksum=self.checksum())
        path.with_suffix(path.suffix + ".json").write_text(json.dumps(meta, indent=2))
        return path

    @classmethod
    def load(cls, path) -> "OracleGrid":
        from ..errors import ChecksumError

        path = Path(path)
        meta = json.loads(path.with_suffix(path.suffix + ".json").read_text())
        nx, nt = meta["shape"]
        data = np.loadtxt(path, delimiter=",", skiprows=1)
        x = data[:, 0].reshape(nx, nt)[:, 0]
        t = data[:, 1].reshape(nx, nt)[0, :]
        grid = cls(x, t, data[:, 2].reshape(nx, nt), meta)
        if grid.checksum() != meta["checksum"]:
            raise ChecksumError(f"oracle grid {path} does not match its checksum")
        return grid


def solve_oracle(nu: float, nx: int = 512, nt: int = 2000) -> OracleGrid:
    x, t, U = crank_nicolson_ab2(nu, nx, nt)
    return OracleGrid(x, t, U, {"problem": "allen_cahn", "nu": nu, "nx": nx, "nt": nt,
                                "scheme": "crank-nicolson + adams-bashforth-2 reaction"})


def allen_cahn_problem(nu: float = DEFAULT_NU, nx: int = 512, nt: int = 2000, cache_path=None) -> PdeProblem:
    check_positive(nu=nu)
    domain = DomainBox((-1.0, 0.0), (1.0, 1.0), ("x", "t"), time_axis=1)
    state = {}

    def oracle() -> OracleGrid:
        if "grid" not in state:
            grid = None
            if cache_path is not None and Path(cache_path).exists():
                grid = OracleGrid.load(cache_path)
                if (grid.meta.get("nu"), grid.meta.get("nx"), grid.meta.get("nt")) != (nu, nx, nt):
                    grid = None
            if grid is None:
                grid = solve_oracle(nu, nx, nt)
                if cache_path is not None:
                    grid.save(cache_path)
            state["grid"] = grid
        return state["grid"]

    def residual(x, fields):
        u = fields[0]
        return (u.d(1) - nu * u.d2(0, 0) + u.value**3 - u.value)[None]

    def reference(x):
        return oracle()(x[:, 0], x[:, 1])[:, None]

    problem = PdeProblem(
        name="allen_cahn",
        domain=domain,
        n_outputs=1,
        residual=residual,
        constraints=[
            Constraint("boundary", (Face(0, -1.0), Face(0, 1.0)), lambda x: np.zeros((len(x), 1))),
            Constraint("initial", (Face(1, 0.0),), lambda x: initial_profile(x[:, :1])),
        ],
        reference=ReferenceSolution("oracle_grid", reference, f"Crank-Nicolson/AB2 on {nx}x{nt}"),
        params={"nu": nu},
        eval_resolution=(100, 50),
    )
    problem.oracle = oracle
    return problem
