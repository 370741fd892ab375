"""PDE benchmark registry."""

from ..errors import ConfigError
from .allen_cahn import allen_cahn_problem
from .base import Constraint, DomainBox, Face, PdeProblem, ReferenceSolution
from .black_scholes import black_scholes_problem, call_greeks, call_price
from .burgers import burgers_problem, cole_hopf_solution
from .navier_stokes import navier_stokes_problem, taylor_green

PROBLEMS = {
    "black_scholes": black_scholes_problem,
    "burgers": burgers_problem,
    "allen_cahn": allen_cahn_problem,
    "navier_stokes": navier_stokes_problem,
}


def make_problem(name: str, **params) -> PdeProblem:
    try:
        factory = PROBLEMS[name]
    except KeyError:
        raise ConfigError(f"unknown problem {name!r}; available: {sorted(PROBLEMS)}") from None
    return factory(**params)


__all__ = [
    "PROBLEMS", "make_problem", "Constraint", "DomainBox", "Face", "PdeProblem", "ReferenceSolution",
    "black_scholes_problem", "burgers_problem", "allen_cahn_problem", "navier_stokes_problem",
    "call_price", "call_greeks", "cole_hopf_solution", "taylor_green",
]
