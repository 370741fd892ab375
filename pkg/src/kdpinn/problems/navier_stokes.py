"""2-D incompressible Navier-Stokes on (0, 2pi)^2 x (0, 1], Taylor-Green vortex."""

from __future__ import annotations

import numpy as np
import torch

from .base import Constraint, DomainBox, Face, PdeProblem, ReferenceSolution, check_positive

DEFAULT_NU = 1e-2
TWO_PI = 2.0 * np.pi


def taylor_green(x, y, t, nu=DEFAULT_NU):
    """(u, v, p) of the decaying vortex.

    The pressure carries the minus sign that balances the convective term of
    this velocity field; with the opposite sign the momentum residual is
    O(1).
    """
    e2 = np.exp(-2.0 * nu * t)
    u = np.cos(x) * np.sin(y) * e2
    v = -np.sin(x) * np.cos(y) * e2
    p = -0.25 * (np.cos(2.0 * x) + np.cos(2.0 * y)) * e2 * e2
    return u, v, p


def taylor_green_residuals(x, y, t, nu=DEFAULT_NU):
    """Momentum and continuity residuals from hand-differentiated fields."""
    e2 = np.exp(-2.0 * nu * t)
    cx, sx, cy, sy = np.cos(x), np.sin(x), np.cos(y), np.sin(y)
    u = cx * sy * e2
    v = -sx * cy * e2
    u_t, v_t = -2.0 * nu * u, -2.0 * nu * v
    u_x, u_y = -sx * sy * e2, cx * cy * e2
    v_x, v_y = -cx * cy * e2, sx * sy * e2
    lap_u, lap_v = -2.0 * u, -2.0 * v
    p_x = 0.5 * np.sin(2.0 * x) * e2 * e2
    p_y = 0.5 * np.sin(2.0 * y) * e2 * e2
    mx = u_t + u * u_x + v * u_y + p_x - nu * lap_u
    my = v_t + u * v_x + v * v_y + p_y - nu * lap_v
    return np.stack([mx, my, u_x + v_y])


def kinetic_energy(t, nu=DEFAULT_NU):
    """Domain-integrated 0.5 |u|^2, equal to pi^2 exp(-4 nu t)."""
    return np.pi**2 * np.exp(-4.0 * nu * np.asarray(t, dtype=float))


def navier_stokes_problem(nu: float = DEFAULT_NU) -> PdeProblem:
    check_positive(nu=nu)
    domain = DomainBox((0.0, 0.0, 0.0), (TWO_PI, TWO_PI, 1.0), ("x", "y", "t"), time_axis=2)

    def exact(pts):
        return np.stack(taylor_green(pts[:, 0], pts[:, 1], pts[:, 2], nu), axis=1)

    def residual(x, fields):
        u, v, p = fields
        mx = u.d(2) + u.value * u.d(0) + v.value * u.d(1) + p.d(0) - nu * (u.d2(0, 0) + u.d2(1, 1))
        my = v.d(2) + u.value * v.d(0) + v.value * v.d(1) + p.d(1) - nu * (v.d2(0, 0) + v.d2(1, 1))
        return torch.stack([mx, my, u.d(0) + v.d(1)])

    return PdeProblem(
        name="navier_stokes",
        domain=domain,
        n_outputs=3,
        residual=residual,
        constraints=[
            Constraint("boundary", (Face(0, 0.0), Face(0, TWO_PI), Face(1, 0.0), Face(1, TWO_PI)), exact),
            Constraint("initial", (Face(2, 0.0),), exact),
        ],
        reference=ReferenceSolution("closed_form", exact, "Taylor-Green vortex"),
        params={"nu": nu},
        output_names=("u", "v", "p"),
        reference_residual=lambda pts: taylor_green_residuals(pts[:, 0], pts[:, 1], pts[:, 2], nu),
        gauge_outputs=(2,),
        eval_resolution=(32, 32, 11),
    )
