"""Viscous Burgers on [0,1]^2 with u(x,0) = -sin(pi x) and homogeneous walls.

The reference comes from the Cole-Hopf transform: the initial condition is
odd and 2-periodic, so the whole-line heat-kernel solution restricted to
[0,1] already satisfies the wall conditions, and

    u(x,t) = - int sin(pi(x-e)) F(x-e) G(e) de / int F(x-e) G(e) de,
    F(y) = exp(-cos(pi y) / (2 pi nu)),  G(e) = exp(-e^2 / (4 nu t)).

Both integrals are evaluated with the trapezoid rule on a uniform grid after
shifting the exponent by its maximum (log-sum-exp), which keeps the ratio
finite for small nu.
"""

from __future__ import annotations

import numpy as np

from .base import Constraint, DomainBox, Face, PdeProblem, ReferenceSolution, check_positive

DEFAULT_NU = 0.01 / np.pi


def _cole_hopf_at_time(x: np.ndarray, t: float, nu: float) -> np.ndarray:
    if t <= 0.0:
        return -np.sin(np.pi * x)
    c = 1.0 / (2.0 * np.pi * nu)
    # beyond |e| > half_width the Gaussian beats the largest possible cosine gain by e^-40
    half_width = np.sqrt(4.0 * nu * t * (2.0 * c + 40.0))
    feature = min(np.sqrt(2.0 * nu * t), 1.0 / (np.pi * np.sqrt(c)))
    n = int(np.ceil(2.0 * half_width / (feature / 6.0))) | 1
    eta = np.linspace(-half_width, half_width, n)
    y = x[:, None] - eta[None, :]
    expo = -c * np.cos(np.pi * y) - eta[None, :] ** 2 / (4.0 * nu * t)
    expo -= expo.max(axis=1, keepdims=True)
    w = np.exp(expo)
    w[:, 0] *= 0.5
    w[:, -1] *= 0.5
    return -(np.sin(np.pi * y) * w).sum(axis=1) / w.sum(axis=1)


def cole_hopf_solution(x, t, nu: float = DEFAULT_NU) -> np.ndarray:
    """Burgers solution at arbitrary (x, t) pairs."""
    x, t = np.broadcast_arrays(np.asarray(x, dtype=float), np.asarray(t, dtype=float))
    shape = x.shape
    x, t = x.reshape(-1), t.reshape(-1)
    out = np.empty_like(x)
    for tv in np.unique(t):
        sel = t == tv
        out[sel] = _cole_hopf_at_time(x[sel], float(tv), nu)
    return out.reshape(shape)


def burgers_problem(nu: float = DEFAULT_NU) -> PdeProblem:
    check_positive(nu=nu)
    domain = DomainBox((0.0, 0.0), (1.0, 1.0), ("x", "t"), time_axis=1)

    def residual(x, fields):
        u = fields[0]
        return (u.d(1) + u.value * u.d(0) - nu * u.d2(0, 0))[None]

    def reference(x):
        return cole_hopf_solution(x[:, 0], x[:, 1], nu)[:, None]

    return PdeProblem(
        name="burgers",
        domain=domain,
        n_outputs=1,
        residual=residual,
        constraints=[
            Constraint("boundary", (Face(0, 0.0), Face(0, 1.0)), lambda x: np.zeros((len(x), 1))),
            Constraint("initial", (Face(1, 0.0),), lambda x: -np.sin(np.pi * x[:, :1])),
        ],
        reference=ReferenceSolution("quadrature", reference, "Cole-Hopf heat-kernel quadrature"),
        params={"nu": nu},
        eval_resolution=(100, 50),
    )
