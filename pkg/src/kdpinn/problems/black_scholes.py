"""European call under Black-Scholes, solved backward from the payoff at t = T."""

from __future__ import annotations

import numpy as np
from scipy.special import erfc

from .base import Constraint, DomainBox, Face, PdeProblem, ReferenceSolution, check_positive

SQRT2 = np.sqrt(2.0)


def norm_cdf(x):
    return 0.5 * erfc(-np.asarray(x, dtype=float) / SQRT2)


def norm_pdf(x):
    x = np.asarray(x, dtype=float)
    return np.exp(-0.5 * x * x) / np.sqrt(2.0 * np.pi)


def _d1_d2(S, tau, K, r, sigma):
    sq = sigma * np.sqrt(tau)
    d1 = (np.log(S / K) + (r + 0.5 * sigma**2) * tau) / sq
    return d1, d1 - sq


def call_price(S, t, K=1.0, r=0.05, sigma=0.2, T=1.0):
    """Closed-form call value; the payoff at tau <= 0 and 0 for S <= 0."""
    S, t = np.broadcast_arrays(np.asarray(S, dtype=float), np.asarray(t, dtype=float))
    shape = S.shape
    S, tau = S.reshape(-1), T - t.reshape(-1)
    out = np.maximum(S - K, 0.0)
    live = (tau > 0) & (S > 0)
    if np.any(live):
        s, ta = S[live], tau[live]
        d1, d2 = _d1_d2(s, ta, K, r, sigma)
        out[live] = s * norm_cdf(d1) - K * np.exp(-r * ta) * norm_cdf(d2)
    out[S <= 0] = 0.0
    return out.reshape(shape)


def call_greeks(S, t, K=1.0, r=0.05, sigma=0.2, T=1.0):
    """(V, dV/dS, d2V/dS2, dV/dt) for tau > 0, S > 0."""
    S = np.asarray(S, dtype=float)
    tau = T - np.asarray(t, dtype=float)
    d1, d2 = _d1_d2(S, tau, K, r, sigma)
    disc = K * np.exp(-r * tau)
    value = S * norm_cdf(d1) - disc * norm_cdf(d2)
    delta = norm_cdf(d1)
    gamma = norm_pdf(d1) / (S * sigma * np.sqrt(tau))
    theta = -(S * norm_pdf(d1) * sigma / (2.0 * np.sqrt(tau)) + r * disc * norm_cdf(d2))
    return value, delta, gamma, theta


def black_scholes_problem(K: float = 1.0, r: float = 0.05, sigma: float = 0.2, T: float = 1.0,
                          s_min: float = 0.5, s_max: float = 1.5) -> PdeProblem:
    check_positive(K=K, sigma=sigma, T=T)
    if not 0 <= s_min < s_max:
        from ..errors import ConfigError

        raise ConfigError(f"invalid price range [{s_min}, {s_max}]")
    domain = DomainBox((s_min, 0.0), (s_max, T), ("S", "t"), time_axis=1)

    def exact(x):
        return call_price(x[:, 0], x[:, 1], K, r, sigma, T)[:, None]

    def residual(x, fields):
        u = fields[0]
        S = x[..., 0]
        return (u.d(1) + r * S * u.d(0) + 0.5 * sigma**2 * S * S * u.d2(0, 0) - r * u.value)[None]

    def reference_residual(x):
        S, t = x[:, 0], x[:, 1]
        v, dS, dSS, dt = call_greeks(S, t, K, r, sigma, T)
        return (dt + r * S * dS + 0.5 * sigma**2 * S**2 * dSS - r * v)[None]

    def payoff(x):
        return np.maximum(x[:, 0] - K, 0.0)[:, None]

    return PdeProblem(
        name="black_scholes",
        domain=domain,
        n_outputs=1,
        residual=residual,
        constraints=[
            Constraint("boundary", (Face(0, s_min), Face(0, s_max)), exact),
            Constraint("terminal", (Face(1, T),), payoff),
        ],
        reference=ReferenceSolution("closed_form", exact, "Black-Scholes call, normal CDF via erfc"),
        params={"K": K, "r": r, "sigma": sigma, "T": T, "s_min": s_min, "s_max": s_max},
        output_names=("u",),
        reference_residual=reference_residual,
        eval_resolution=(100, 50),
    )
