"""Benchmark problems: the fish-harvest family and a scalar LQ problem.

The fish-harvest problem has logistic-with-harvest dynamics
``dx/dt = x (x_s - x - u)`` and comes in three variants that differ only in
objective and terminal data:

* ``bilinear`` - stage cost ``a x + b u - c x u``, no Mayer term, no terminal
  constraint.  Its optimal solutions are bang-singular; the singular arc is a
  controlled equilibrium with closed-form primal and dual values.
* ``quad_mayer`` - quadratic stage cost centered at (4, 5) with weight 10 on
  the state term, Mayer term ``-x^2/2``.  The Mayer term is unbounded below
  in x, so this variant caps the state at ``x_s`` (an invariant set of the
  dynamics for nonnegative inputs).
* ``quad_terminal`` - quadratic stage cost centered at (3.64, 1.37) and the
  terminal equality ``x(T) = 3``.

The LQ benchmark ``dx/dt = a x + b u`` with cost ``(q x^2 + r u^2)/2`` has a
scalar algebraic-Riccati oracle used to validate exponential turnpike fits.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .equilibrium import Equilibrium, solve_steady_state
from .errors import ConfigError, ConvergenceError
from .problem import DerivativeOracles, OcpProblem

FISH_VARIANTS = ("bilinear", "quad_mayer", "quad_terminal")


@dataclass(frozen=True)
class FishParams:
    """Coefficients of the fish-harvest problem."""

    a: float = 1.0
    b: float = 2.0
    c: float = 2.0
    x_s: float = 5.0
    u_max: float = 5.0
    x_min: float = 0.1

    def __post_init__(self):
        vals = (self.a, self.b, self.c, self.x_s, self.u_max, self.x_min)
        if any(not v > 0 for v in vals):
            raise ConfigError("all fish parameters must be positive")
        if not self.x_min < self.x_s:
            raise ConfigError("x_min must lie below the sustainable density x_s")

    @property
    def constrained_input(self) -> float:
        """Input that holds the state on the lower bound ``x = x_min``."""
        return self.x_s - self.x_min


# Quadratic-variant constants (stage-cost centers, weight, terminal target).
_QUAD_MAYER = dict(x_c=4.0, u_c=5.0, q=10.0)
_QUAD_TERMINAL = dict(x_c=3.64, u_c=1.37, q=10.0, x_f=3.0)


def fish_problem(variant: str, params: FishParams | None = None, *,
                 x0: float = 0.5, horizon: float = 1.0) -> OcpProblem:
    """Build one of the three fish-harvest variants as a continuous OCP."""
    if variant not in FISH_VARIANTS:
        raise ConfigError(f"unknown fish variant {variant!r}; pick one of {FISH_VARIANTS}")
    p = params or FishParams()

    def dynamics(x, u):
        return x * (p.x_s - x - u)

    def f_x(x, u):
        return (p.x_s - 2.0 * x - u)[..., None]

    def f_u(x, u):
        return (-x)[..., None]

    if variant == "bilinear":
        def stage(x, u):
            return (p.a * x + p.b * u - p.c * x * u)[..., 0]

        def l_x(x, u):
            return p.a - p.c * u

        def l_u(x, u):
            return p.b - p.c * x

        mayer = None
        phi_x = None
        psi = None
        psi_x = None
        term_eq = ()
        x_hi = None
    else:
        consts = _QUAD_MAYER if variant == "quad_mayer" else _QUAD_TERMINAL
        x_c, u_c, q = consts["x_c"], consts["u_c"], consts["q"]

        def stage(x, u):
            return 0.5 * (q * (x - x_c) ** 2 + (u - u_c) ** 2)[..., 0]

        def l_x(x, u):
            return q * (x - x_c)

        def l_u(x, u):
            return u - u_c

        if variant == "quad_mayer":
            def mayer(x):
                return -0.5 * (x ** 2)[..., 0]

            def phi_x(x):
                return -x

            psi = None
            psi_x = None
            term_eq = ()
            x_hi = p.x_s
        else:
            mayer = None
            phi_x = None
            x_f = consts["x_f"]

            def psi(x):
                return x - x_f

            def psi_x(x):
                return np.ones(x.shape[:-1] + (1, 1))

            term_eq = (0,)
            x_hi = None

    oracles = DerivativeOracles(
        f_x=f_x, f_u=f_u, l_x=l_x, l_u=l_u, phi_x=phi_x, psi_x=psi_x
    )
    return OcpProblem(
        state_dim=1,
        input_dim=1,
        dynamics=dynamics,
        stage_cost=stage,
        horizon=horizon,
        initial_state=[x0],
        time_mode="continuous",
        mayer_cost=mayer,
        terminal_constraints=psi,
        terminal_equalities=term_eq,
        u_box=([0.0], [p.u_max]),
        x_box=([p.x_min], None if x_hi is None else [x_hi]),
        derivative_oracles=oracles,
        name=f"fish:{variant}",
    )


def fish_singular_arc(params: FishParams | None = None) -> Equilibrium:
    """Closed-form steady state of the bilinear variant's singular arc.

    Returns the primal pair ``(x_bar, u_bar)`` from the classical closed
    forms together with the steady costate of the minimization optimality
    system, ``lambda_bar = b/x_bar - c`` (the mirror-image shadow-price
    convention would negate it), and cross-validates everything against
    :func:`solve_steady_state` to 1e-6.
    """
    p = params or FishParams()
    x_bar = 0.5 * p.x_s + (p.b - p.a) / (2.0 * p.c)
    if not x_bar > p.x_min:
        raise ConfigError(
            f"singular-arc state {x_bar:.4g} does not lie above x_min={p.x_min:.4g}"
        )
    u_bar = p.x_s - x_bar
    lam_bar = p.b / x_bar - p.c
    problem = fish_problem("bilinear", p, x0=x_bar, horizon=1.0)
    eq = Equilibrium(
        x_bar=[x_bar],
        u_bar=[u_bar],
        lambda_bar=[lam_bar],
        mu_bar=np.zeros(problem.n_ineq),
        cost=float(problem.cost(np.array([x_bar]), np.array([u_bar]))[0]),
    )
    solved = solve_steady_state(problem, (eq.x_bar, eq.u_bar))
    gap = max(
        float(np.max(np.abs(solved.x_bar - eq.x_bar))),
        float(np.max(np.abs(solved.u_bar - eq.u_bar))),
        float(np.max(np.abs(solved.lambda_bar - eq.lambda_bar))),
    )
    if gap > 1e-6:
        raise ConvergenceError(
            "closed-form singular arc disagrees with the steady-state solve",
            residuals={"gap": gap},
        )
    return eq


@dataclass(frozen=True)
class LqParams:
    """Scalar LQ data: ``dx/dt = a x + b u``, cost ``(q x^2 + r u^2)/2``."""

    a: float = 1.0
    b: float = 1.0
    q: float = 1.0
    r: float = 1.0

    def __post_init__(self):
        if self.q < 0 or self.r <= 0:
            raise ConfigError("need q >= 0 and r > 0")
        if self.b == 0 and self.a >= 0:
            raise ConfigError("(a, b) must be stabilizable: b != 0 or a < 0")


@dataclass(frozen=True)
class RiccatiOracle:
    """Stabilizing solution of ``2 a p - b^2 p^2 / r + q = 0`` and friends."""

    p: float
    closed_loop_rate: float

    def value(self, x0: float) -> float:
        return 0.5 * self.p * float(x0) ** 2

    def gradient(self, x0: float) -> float:
        return self.p * float(x0)


def lq_problem(params: LqParams | None = None, *, x0: float = 1.0,
               horizon: float = 10.0) -> OcpProblem:
    p = params or LqParams()

    def dynamics(x, u):
        return p.a * x + p.b * u

    def stage(x, u):
        return 0.5 * (p.q * x ** 2 + p.r * u ** 2)[..., 0]

    oracles = DerivativeOracles(
        f_x=lambda x, u: np.full(x.shape[:-1] + (1, 1), p.a),
        f_u=lambda x, u: np.full(x.shape[:-1] + (1, 1), p.b),
        l_x=lambda x, u: p.q * x,
        l_u=lambda x, u: p.r * u,
    )
    return OcpProblem(
        state_dim=1,
        input_dim=1,
        dynamics=dynamics,
        stage_cost=stage,
        horizon=horizon,
        initial_state=[x0],
        time_mode="continuous",
        derivative_oracles=oracles,
        name="lq",
    )


def riccati_oracle(params: LqParams | None = None) -> RiccatiOracle:
    p = params or LqParams()
    if p.b == 0:
        if p.a >= 0:
            raise ConfigError("no stabilizing Riccati root for b = 0, a >= 0")
        pp = -p.q / (2.0 * p.a)
        rate = abs(p.a)
    else:
        disc = math.sqrt(p.a ** 2 + p.b ** 2 * p.q / p.r)
        pp = p.r * (p.a + disc) / p.b ** 2
        rate = abs(p.a - p.b ** 2 * pp / p.r)
    return RiccatiOracle(p=pp, closed_loop_rate=rate)
