"""Controlled equilibria and the steady-state optimization problem.

The steady-state problem minimizes the stage cost over controlled
equilibria (``f(x,u) = x`` in discrete time, ``f(x,u) = 0`` in continuous
time) subject to the combined path inequalities.  Its KKT system doubles as
the stationary form of the full trajectory optimality conditions, so the
residuals checked here are reused by the trajectory-level reports.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import ConvergenceError, DimensionError, InfeasibleStartError
from .problem import OcpProblem

_EQ_RESIDUAL_RTOL = 1e-8
_NCO_TOL = 1e-6


@dataclass(frozen=True)
class Equilibrium:
    """Controlled steady state with its steady costate and multipliers."""

    x_bar: np.ndarray
    u_bar: np.ndarray
    lambda_bar: np.ndarray
    mu_bar: np.ndarray
    cost: float

    def __post_init__(self):
        for name in ("x_bar", "u_bar", "lambda_bar", "mu_bar"):
            arr = np.asarray(getattr(self, name), dtype=float).reshape(-1).copy()
            arr.setflags(write=False)
            object.__setattr__(self, name, arr)
        object.__setattr__(self, "cost", float(self.cost))

    def as_dict(self):
        return {
            "x_bar": self.x_bar.tolist(),
            "u_bar": self.u_bar.tolist(),
            "lambda_bar": self.lambda_bar.tolist(),
            "mu_bar": self.mu_bar.tolist(),
            "cost": self.cost,
        }


def equilibrium_residual(problem: OcpProblem, x, u) -> float:
    """Norm of the controlled-equilibrium defect at (x, u)."""
    x = np.asarray(x, dtype=float).reshape(-1)
    u = np.asarray(u, dtype=float).reshape(-1)
    fx = problem.dyn(x, u)[0]
    defect = fx - x if problem.time_mode == "discrete" else fx
    return float(np.linalg.norm(defect))


def steady_nco_residuals(problem: OcpProblem, eq: Equilibrium) -> dict:
    """Residual norms of the stationary first-order conditions at ``eq``.

    Returns the equilibrium defect, adjoint and input stationarity residuals,
    dual feasibility (most negative multiplier, clipped at 0) and worst
    complementarity product.
    """
    x, u = eq.x_bar, eq.u_bar
    lam, mu = eq.lambda_bar, eq.mu_bar
    if x.shape != (problem.state_dim,):
        raise DimensionError("x_bar", (problem.state_dim,), x.shape)
    if mu.shape != (problem.n_ineq,):
        raise DimensionError("mu_bar", (problem.n_ineq,), mu.shape)

    fx = problem.f_x(x, u)[0]
    fu = problem.f_u(x, u)[0]
    lx = problem.l_x(x, u)[0]
    lu = problem.l_u(x, u)[0]
    a_eff = fx - np.eye(problem.state_dim) if problem.time_mode == "discrete" else fx
    adj = lx + a_eff.T @ lam
    inp = lu + fu.T @ lam
    comp = 0.0
    if problem.n_ineq:
        Jx, Ju = problem.ineq_jacobians(x, u)
        adj = adj + Jx[0].T @ mu
        inp = inp + Ju[0].T @ mu
        gvals = problem.ineq(x, u)[0]
        comp = float(np.max(np.abs(mu * gvals)))
    return {
        "equilibrium": equilibrium_residual(problem, x, u),
        "adjoint": float(np.max(np.abs(adj))),
        "input": float(np.max(np.abs(inp))),
        "dual_feasibility": float(max(0.0, -(mu.min() if mu.size else 0.0))),
        "complementarity": comp,
    }


def validate_equilibrium(problem: OcpProblem, eq: Equilibrium):
    """Raise when ``eq`` violates the equilibrium or stationary-NCO bounds."""
    res = steady_nco_residuals(problem, eq)
    x_scale = 1.0 + float(np.linalg.norm(eq.x_bar))
    if res["equilibrium"] > _EQ_RESIDUAL_RTOL * x_scale:
        raise ConvergenceError("equilibrium defect too large", residuals=res)
    worst = max(res["adjoint"], res["input"], res["dual_feasibility"], res["complementarity"])
    if worst > _NCO_TOL:
        raise ConvergenceError("stationary optimality residuals too large", residuals=res)


def _kkt_residual(problem, x, u, lam, mu_active, active):
    fx_val = problem.dyn(x, u)[0]
    r_dyn = fx_val - x if problem.time_mode == "discrete" else fx_val
    fx = problem.f_x(x, u)[0]
    fu = problem.f_u(x, u)[0]
    a_eff = fx - np.eye(problem.state_dim) if problem.time_mode == "discrete" else fx
    r_adj = problem.l_x(x, u)[0] + a_eff.T @ lam
    r_inp = problem.l_u(x, u)[0] + fu.T @ lam
    if active.size:
        Jx, Ju = problem.ineq_jacobians(x, u)
        r_adj = r_adj + Jx[0][active].T @ mu_active
        r_inp = r_inp + Ju[0][active].T @ mu_active
        r_act = problem.ineq(x, u)[0][active]
    else:
        r_act = np.zeros(0)
    return np.concatenate([r_dyn, r_adj, r_inp, r_act])


def solve_steady_state(problem: OcpProblem, initial_guess, max_iter: int = 200,
                       tol: float = 1e-12, feas_slack: float = 1e-2) -> Equilibrium:
    """Solve the steady-state problem by damped Newton with active-set pivoting.

    The KKT point reached depends on the supplied guess (the solve is local);
    inequality activity is decided by multiplier-sign / primal-feasibility
    pivoting with ties broken toward inactive.
    """
    x0, u0 = initial_guess
    x = np.asarray(x0, dtype=float).reshape(-1).copy()
    u = np.asarray(u0, dtype=float).reshape(-1).copy()
    if x.shape != (problem.state_dim,):
        raise DimensionError("initial_guess x", (problem.state_dim,), x.shape)
    if u.shape != (problem.input_dim,):
        raise DimensionError("initial_guess u", (problem.input_dim,), u.shape)

    n_ineq = problem.n_ineq
    if n_ineq:
        g0 = problem.ineq(x, u)[0]
        if np.max(g0) > feas_slack:
            raise InfeasibleStartError(float(np.max(g0)), feas_slack)
        active = np.where(g0 > -1e-8)[0]
    else:
        active = np.array([], dtype=int)

    lam = np.zeros(problem.state_dim)
    piv_tol = 1e-10

    for _pivot in range(2 * n_ineq + 4):
        mu_a = np.zeros(active.size)
        x, u, lam, mu_a, res_norm, n_it = _newton_on_active_set(
            problem, x, u, lam, mu_a, active, max_iter, tol
        )
        if res_norm > 1e-8:
            raise ConvergenceError(
                "steady-state Newton did not converge",
                best=(x, u, lam),
                residuals={"kkt": res_norm},
                iterations=n_it,
            )
        # Pivot: drop the most negative multiplier, else add the most
        # violated inactive row; ties (both clean) terminate.
        if active.size and mu_a.min() < -piv_tol:
            active = np.delete(active, int(np.argmin(mu_a)))
            continue
        if n_ineq:
            g = problem.ineq(x, u)[0]
            inactive = np.setdiff1d(np.arange(n_ineq), active)
            if inactive.size and g[inactive].max() > piv_tol:
                active = np.sort(np.append(active, inactive[int(np.argmax(g[inactive]))]))
                continue
        mu = np.zeros(n_ineq)
        if active.size:
            mu[active] = np.maximum(mu_a, 0.0)
        eq = Equilibrium(
            x_bar=x, u_bar=u, lambda_bar=lam, mu_bar=mu,
            cost=float(problem.cost(x, u)[0]),
        )
        validate_equilibrium(problem, eq)
        return eq

    raise ConvergenceError("steady-state active-set pivoting cycled", best=(x, u, lam))


def _newton_on_active_set(problem, x, u, lam, mu_a, active, max_iter, tol):
    nx, nu = problem.state_dim, problem.input_dim
    na = active.size

    def pack(x, u, lam, mu_a):
        return np.concatenate([x, u, lam, mu_a])

    def unpack(v):
        return (v[:nx], v[nx:nx + nu], v[nx + nu:2 * nx + nu], v[2 * nx + nu:])

    v = pack(x, u, lam, mu_a)

    def residual(v):
        xx, uu, ll, mm = unpack(v)
        return _kkt_residual(problem, xx, uu, ll, mm, active)

    r = residual(v)
    for it in range(max_iter):
        nrm = float(np.max(np.abs(r))) if r.size else 0.0
        if nrm <= tol * (1.0 + float(np.max(np.abs(v)))):
            break
        J = _fd_residual_jacobian(residual, v, r)
        try:
            step = np.linalg.solve(J, -r)
        except np.linalg.LinAlgError:
            step = np.linalg.lstsq(J, -r, rcond=None)[0]
        # Armijo damping on the squared residual norm.
        base = float(r @ r)
        alpha = 1.0
        for _ in range(40):
            cand = v + alpha * step
            rc = residual(cand)
            if float(rc @ rc) <= (1.0 - 1e-4 * alpha) * base or alpha < 1e-10:
                v, r = cand, rc
                break
            alpha *= 0.5
        else:
            break
    x, u, lam, mu_a = unpack(v)
    return x, u, lam, mu_a, float(np.max(np.abs(r))) if r.size else 0.0, it + 1


def _fd_residual_jacobian(residual, v, r0):
    n = v.size
    J = np.empty((r0.size, n))
    h = np.sqrt(np.finfo(float).eps) * np.maximum(1.0, np.abs(v))
    for j in range(n):
        vp = v.copy()
        vp[j] += h[j]
        J[:, j] = (residual(vp) - r0) / h[j]
    return J
