"""Turnpike detection, quantification and classification.

Given solved trajectories and a candidate equilibrium, this module measures
how long solutions stay outside an epsilon-ball around the equilibrium
(cardinality in discrete time, Lebesgue measure approximated by
left-endpoint node counting in continuous time), tabulates the bound
``nu(eps)`` over solution batches, fits two-sided exponential envelopes
``C (rho^t + rho^(T-t))``, converts fitted envelopes into worst-case
entry-time/measure/cardinality bounds, classifies exactness, and checks the
relation between the steady costate and the value-function gradient.

Deviation norms are unweighted Euclidean norms on the concatenated selected
components (optional per-block weights are accepted); this choice is
recorded in report metadata.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from .equilibrium import Equilibrium
from .errors import ConfigError, DimensionError, UndeterminedFitError
from .solution import Solution

SELECTORS = ("state", "input_state", "primal_dual")

_FLOAT_FMT = "%.17g"


def _check_selector(sel: str):
    if sel not in SELECTORS:
        raise ConfigError(f"unknown selector {sel!r}; pick one of {SELECTORS}")


def _is_discrete(sol: Solution) -> bool:
    mode = sol.metadata.get("time_mode")
    if mode is not None:
        return mode == "discrete"
    nodes = sol.grid.nodes
    return bool(np.allclose(nodes, np.round(nodes)) and np.allclose(np.diff(nodes), 1.0))


def _stack_components(sol: Solution, eq: Equilibrium, sel: str, weights=None):
    """Per-node deviation matrix for the selected components.

    Inputs and multipliers live on intervals; at node ``k`` the value of the
    interval starting there is used, and the terminal node reuses the last
    interval (its left interval).
    """
    parts = [sol.states - eq.x_bar[None, :]]
    if sel in ("input_state", "primal_dual"):
        parts.append(sol.inputs_at_nodes() - eq.u_bar[None, :])
    if sel == "primal_dual":
        if sol.adjoints.shape != sol.states.shape:
            raise DimensionError("adjoints", sol.states.shape, sol.adjoints.shape)
        parts.append(sol.adjoints - eq.lambda_bar[None, :])
        mu_nodes = sol.multipliers_at_nodes()
        if eq.mu_bar.size != mu_nodes.shape[1]:
            raise DimensionError("mu_bar", (mu_nodes.shape[1],), eq.mu_bar.shape)
        if eq.mu_bar.size:
            parts.append(mu_nodes - eq.mu_bar[None, :])
    block = np.concatenate(parts, axis=1)
    if weights is not None:
        w = np.asarray(weights, dtype=float).reshape(-1)
        if w.shape[0] != block.shape[1]:
            raise DimensionError("weights", (block.shape[1],), w.shape)
        block = block * w[None, :]
    return block


def deviation_profile(sol: Solution, eq: Equilibrium, sel: str = "state",
                      weights=None) -> np.ndarray:
    """Rows ``(t, e(t))`` of the deviation norm at every grid node."""
    _check_selector(sel)
    block = _stack_components(sol, eq, sel, weights)
    e = np.linalg.norm(block, axis=1)
    return np.column_stack([sol.grid.nodes, e])


def exit_measure(sol: Solution, eq: Equilibrium, sel: str, epsilon: float,
                 weights=None) -> dict:
    """Time spent strictly outside the epsilon-ball around the equilibrium.

    Discrete mode counts nodes ``0..T-1`` exactly; continuous mode returns
    the left-endpoint-rule approximation of the Lebesgue measure (error is
    at most two interval lengths per threshold crossing).  Also reports the
    offending times and the number of threshold crossings.
    """
    if not epsilon > 0:
        raise ConfigError("epsilon must be positive")
    prof = deviation_profile(sol, eq, sel, weights)
    t, e = prof[:, 0], prof[:, 1]
    outside = e[:-1] > epsilon  # nodes 0..N-1 (intervals / discrete instants)
    crossings = int(np.sum(outside[1:] != outside[:-1]) + (1 if outside[0] else 0))
    if _is_discrete(sol):
        size = float(np.sum(outside))
    else:
        size = float(np.sum(np.diff(t)[outside]))
    return {
        "size": size,
        "times": t[:-1][outside],
        "crossings": crossings,
        "max_step": float(np.max(np.diff(t))),
    }


@dataclass(frozen=True)
class NuTable:
    """Worst-case exit size per epsilon over a batch, monotone by running max."""

    epsilons: np.ndarray
    nu: np.ndarray
    batch: tuple  # (x0 tuple, horizon) descriptors

    def __post_init__(self):
        eps = np.asarray(self.epsilons, dtype=float)
        if np.any(np.diff(eps) >= 0):
            raise ConfigError("epsilon grid must be strictly decreasing")
        nu = np.asarray(self.nu, dtype=float).copy()
        nu = np.maximum.accumulate(nu)  # smaller eps can only exit longer
        for name, arr in (("epsilons", eps), ("nu", nu)):
            arr = arr.copy()
            arr.setflags(write=False)
            object.__setattr__(self, name, arr)

    def value(self, epsilon: float) -> float:
        idx = int(np.argmin(np.abs(self.epsilons - epsilon)))
        return float(self.nu[idx])

    def to_csv(self, path, header_lines=()):
        with open(path, "w") as fh:
            for line in header_lines:
                fh.write(f"# {line}\n")
            fh.write("epsilon,nu\n")
            for eps, nu in zip(self.epsilons, self.nu):
                fh.write(f"{_FLOAT_FMT % eps},{_FLOAT_FMT % nu}\n")


def _batch_descriptor(batch: Sequence[Solution]) -> tuple:
    return tuple(
        (tuple(np.round(s.states[0], 12).tolist()), float(s.grid.horizon)) for s in batch
    )


def estimate_nu(batch: Sequence[Solution], eq: Equilibrium, sel: str,
                eps_grid, weights=None) -> NuTable:
    """Tabulate ``nu(eps) = max over batch`` of the exit size."""
    if not batch:
        raise ConfigError("empty batch")
    _check_selector(sel)
    eps_grid = np.asarray(eps_grid, dtype=float)
    values = [
        max(exit_measure(sol, eq, sel, eps, weights)["size"] for sol in batch)
        for eps in eps_grid
    ]
    return NuTable(epsilons=eps_grid, nu=np.asarray(values), batch=_batch_descriptor(batch))


@dataclass(frozen=True)
class ExponentialFit:
    """Two-sided envelope ``e(t) <= C (rho^t + rho^(T-t))`` fitted on a batch."""

    C: float
    gamma: float
    rho: float
    fit_residual: float
    valid: bool
    safety: float = 1.1

    def envelope(self, t, horizon: float) -> np.ndarray:
        t = np.asarray(t, dtype=float)
        return self.C * (np.exp(-self.gamma * t) + np.exp(-self.gamma * (horizon - t)))


def fit_exponential(batch: Sequence[Solution], eq: Equilibrium, sel: str = "state",
                    weights=None, safety: float = 1.1) -> ExponentialFit:
    """Fit the decay rate on entry arcs and calibrate C as the worst ratio.

    The rate comes from a log-linear regression of the deviation on
    ``t in [0, T/2]`` restricted to points above ``10 x solver tolerance``
    (floor noise removed); each batch member is regressed separately and the
    slopes are combined weighted by point count.  ``C`` is the maximum of
    ``e(t) / (rho^t + rho^(T-t))`` over every node of every member, so the
    envelope holds by construction whenever the fit is sane; the validity
    flag re-checks it with the safety factor.
    """
    if not batch:
        raise ConfigError("empty batch")
    _check_selector(sel)
    slopes, counts, residuals = [], [], []
    profiles = []
    for sol in batch:
        prof = deviation_profile(sol, eq, sel, weights)
        profiles.append(prof)
        t, e = prof[:, 0], prof[:, 1]
        horizon = sol.grid.horizon
        floor = 10.0 * sol.solver_tolerance
        half = (t <= 0.5 * horizon) & (e > floor)
        if np.count_nonzero(half) < 3:
            continue
        # entry arc only: stop at the first interior minimum of the half-window
        tt, ee = t[half], e[half]
        k_min = int(np.argmin(ee))
        if k_min < 2:
            continue
        tt, ee = tt[: k_min + 1], ee[: k_min + 1]
        A = np.column_stack([tt, np.ones_like(tt)])
        coef, res, *_ = np.linalg.lstsq(A, np.log(ee), rcond=None)
        slopes.append(-coef[0])
        counts.append(tt.size)
        residuals.append(float(res[0]) if res.size else 0.0)
    if not slopes or max(slopes) <= 0:
        raise UndeterminedFitError(
            "no decaying entry segment found (horizon too short or batch constant)"
        )
    gamma = float(np.average(slopes, weights=counts))
    if gamma <= 0:
        raise UndeterminedFitError("fitted rate is not positive")
    rho = math.exp(-gamma)
    C = 0.0
    for sol, prof in zip(batch, profiles):
        t, e = prof[:, 0], prof[:, 1]
        env = np.exp(-gamma * t) + np.exp(-gamma * (sol.grid.horizon - t))
        C = max(C, float(np.max(e / env)))
    valid = C > 0 and gamma > 0
    if valid:
        for sol, prof in zip(batch, profiles):
            t, e = prof[:, 0], prof[:, 1]
            fit = ExponentialFit(C, gamma, rho, 0.0, True, safety)
            if np.any(e > safety * fit.envelope(t, sol.grid.horizon) + 1e-300):
                valid = False
                break
    residual = float(np.sqrt(np.sum(residuals) / max(1, sum(counts))))
    return ExponentialFit(C=C, gamma=gamma, rho=rho, fit_residual=residual,
                          valid=valid, safety=safety)


def turnpike_bounds(fit: ExponentialFit, epsilon: float, horizon: float) -> dict:
    """Worst-case entry time and exit-size bounds implied by the envelope.

    ``t1`` is the worst-case entry time into the epsilon-ball; it is clamped
    to 0 when the inner square root turns complex (then the envelope cannot
    confine the trajectory inside the ball for any initial window, and the
    horizon-free bound applies).  ``measure_bound`` is the horizon-free form
    ``max(0, -(2/gamma) ln(eps / 2C))``; ``cardinality_bound`` is the
    smallest integer above ``2 log_rho(eps / 2C)``, the discrete analog.
    """
    if not epsilon > 0:
        raise ConfigError("epsilon must be positive")
    C, gamma = fit.C, fit.gamma
    if epsilon >= 2.0 * C:
        return {"t1": 0.0, "measure_bound": 0.0, "cardinality_bound": 0}
    ratio = epsilon / (2.0 * C)
    disc = ratio * ratio - math.exp(-gamma * horizon)
    if disc < 0:
        t1 = 0.0
    else:
        t1 = max(0.0, -math.log(ratio + math.sqrt(disc)) / gamma)
    measure = max(0.0, -2.0 / gamma * math.log(ratio))
    cardinality = int(math.ceil(max(0.0, 2.0 * math.log(ratio) / math.log(fit.rho))))
    return {"t1": t1, "measure_bound": measure, "cardinality_bound": cardinality}


@dataclass(frozen=True)
class ClassifyTolerances:
    """Thresholds for the exactness verdict and turnpike detection."""

    eps_min_scale: float = 1e-3
    eps_ref_scale: float = 1e-1
    slack_intervals: int = 3
    dwell_fraction: float = 0.5
    n_eps: int = 7


@dataclass(frozen=True)
class TurnpikeReport:
    selector: str
    equilibrium: Equilibrium
    nu_table: NuTable
    fit: Optional[ExponentialFit]
    exactness: str  # "exact" | "approximate" | "undetermined"
    entry_exit: tuple  # per member: (entry time, exit time, crossings)
    eps_ref: float
    eps_min: float
    metadata: dict = field(default_factory=dict)

    def to_json_dict(self) -> dict:
        return {
            "selector": self.selector,
            "equilibrium": self.equilibrium.as_dict(),
            "nu_table": {
                "epsilons": self.nu_table.epsilons.tolist(),
                "nu": self.nu_table.nu.tolist(),
                "batch": [list(b) for b in self.nu_table.batch],
            },
            "fit": None
            if self.fit is None
            else {
                "C": self.fit.C,
                "gamma": self.fit.gamma,
                "rho": self.fit.rho,
                "fit_residual": self.fit.fit_residual,
                "valid": self.fit.valid,
                "safety": self.fit.safety,
            },
            "exactness": self.exactness,
            "entry_exit": [list(x) for x in self.entry_exit],
            "eps_ref": self.eps_ref,
            "eps_min": self.eps_min,
            "metadata": self.metadata,
        }

    def to_json(self, path, header: Optional[dict] = None):
        doc = self.to_json_dict()
        if header:
            doc["header"] = header
        with open(path, "w") as fh:
            json.dump(doc, fh, indent=1)
            fh.write("\n")


def _selector_scale(eq: Equilibrium, sel: str) -> float:
    parts = [eq.x_bar]
    if sel in ("input_state", "primal_dual"):
        parts.append(eq.u_bar)
    if sel == "primal_dual":
        parts.append(eq.lambda_bar)
        parts.append(eq.mu_bar)
    return float(np.linalg.norm(np.concatenate(parts))) + 1.0


def classify_turnpike(batch: Sequence[Solution], eq: Equilibrium,
                      tolerances: ClassifyTolerances | None = None,
                      selector: str = "state", weights=None) -> TurnpikeReport:
    """Classify the batch as exact / approximate / undetermined for one selector.

    Exact: the exit size at ``eps_min`` exceeds the one at ``eps_ref`` by no
    more than a slack of a few grid intervals (solutions reach the
    equilibrium to solver accuracy).  Approximate: not exact, but every
    member dwells inside the ``eps_ref``-ball for at least the configured
    fraction of its horizon.  Otherwise undetermined.
    """
    tol = tolerances or ClassifyTolerances()
    if len({float(s.grid.horizon) for s in batch}) < 2:
        raise ConfigError("batch must cover at least two horizons")
    if len({tuple(np.round(s.states[0], 10)) for s in batch}) < 2:
        raise ConfigError("batch must cover at least two initial states")
    _check_selector(selector)

    scale = _selector_scale(eq, selector)
    eps_ref = tol.eps_ref_scale * scale
    eps_min = tol.eps_min_scale * scale
    eps_grid = np.geomspace(eps_ref, eps_min, tol.n_eps)
    table = estimate_nu(batch, eq, selector, eps_grid, weights)

    max_step = max(exit_measure(s, eq, selector, eps_ref, weights)["max_step"] for s in batch)
    discrete = _is_discrete(batch[0])
    slack = tol.slack_intervals * (1.0 if discrete else max_step)
    exact = table.value(eps_min) <= table.value(eps_ref) + slack

    entry_exit = []
    dwell_ok = True
    for sol in batch:
        prof = deviation_profile(sol, eq, selector, weights)
        t, e = prof[:, 0], prof[:, 1]
        inside = e <= eps_ref
        info = exit_measure(sol, eq, selector, eps_ref, weights)
        if np.any(inside):
            entry = float(t[np.argmax(inside)])
            exit_t = float(t[len(t) - 1 - np.argmax(inside[::-1])])
        else:
            entry = exit_t = float("nan")
            dwell_ok = False
        entry_exit.append((entry, exit_t, info["crossings"]))
        horizon = sol.grid.horizon
        if info["size"] > (1.0 - tol.dwell_fraction) * horizon:
            dwell_ok = False

    try:
        fit = fit_exponential(batch, eq, selector, weights)
    except UndeterminedFitError:
        fit = None

    if exact and dwell_ok:
        verdict = "exact"
    elif dwell_ok:
        verdict = "approximate"
    else:
        verdict = "undetermined"

    return TurnpikeReport(
        selector=selector,
        equilibrium=eq,
        nu_table=table,
        fit=fit,
        exactness=verdict,
        entry_exit=tuple(entry_exit),
        eps_ref=eps_ref,
        eps_min=eps_min,
        metadata={
            "norm": "euclidean-unweighted" if weights is None else "euclidean-weighted",
            "slack": slack,
            "dwell_fraction": tol.dwell_fraction,
        },
    )


def classify_all_selectors(batch, eq, tolerances=None, weights=None) -> dict:
    """Run :func:`classify_turnpike` for each selector."""
    return {
        sel: classify_turnpike(batch, eq, tolerances, sel, weights) for sel in SELECTORS
    }


def value_gradient_check(problem, solution: Solution, eq: Equilibrium, tau: float,
                         solver=None, eps_ref: Optional[float] = None) -> dict:
    """Compare the costate at ``tau`` with a finite-difference value gradient.

    Re-solves the problem on ``[tau, T]`` from perturbed initial states
    ``x(tau) +- h e_i`` and central-differences the optimal value.  ``tau``
    must lie inside the detected turnpike window (state deviation at most
    ``eps_ref``).
    """
    from .sqp import solve_trajectory  # local import to avoid a cycle

    solve = solver or solve_trajectory
    k = solution.node_index(tau)
    t_tau = float(solution.grid.nodes[k])
    prof = deviation_profile(solution, eq, "state")
    if eps_ref is None:
        eps_ref = 1e-1 * (float(np.linalg.norm(eq.x_bar)) + 1.0)
    if prof[k, 1] > eps_ref:
        raise ConfigError(
            f"tau={t_tau} lies outside the turnpike window "
            f"(deviation {prof[k,1]:.3g} > {eps_ref:.3g})"
        )
    x_tau = solution.states[k]
    horizon_left = solution.grid.horizon - t_tau
    if horizon_left <= 0:
        raise ConfigError("tau must lie strictly inside the horizon")
    h = 1e-4 * (1.0 + float(np.linalg.norm(x_tau)))

    n_rem = max(2, len(solution.grid) - 1 - k)
    rem_nodes = solution.grid.nodes[k:] - t_tau
    from .grid import TimeGrid

    grid = TimeGrid(rem_nodes) if rem_nodes.size >= 3 else TimeGrid.uniform(horizon_left, n_rem)

    def tail_guess():
        return Solution(
            grid=grid,
            states=solution.states[k:],
            inputs=solution.inputs[k:],
            adjoints=solution.adjoints[k:],
            multipliers=solution.multipliers[k:],
            objective=0.0,
            solver_tolerance=solution.solver_tolerance,
            metadata={},
        )

    nx = x_tau.size
    grad = np.zeros(nx)
    for i in range(nx):
        values = []
        for sign in (+1.0, -1.0):
            x0 = x_tau.copy()
            x0[i] += sign * h
            sub = problem.with_(horizon=horizon_left, initial_state=x0)
            sol = solve(sub, grid, guess=tail_guess())
            values.append(sol.objective)
        grad[i] = (values[0] - values[1]) / (2.0 * h)

    lam_tau = solution.adjoints[k]
    return {
        "tau": t_tau,
        "lambda_at_tau": lam_tau,
        "fd_gradient": grad,
        "gap_to_lambda_tau": float(np.linalg.norm(grad - lam_tau)),
        "gap_to_lambda_bar": float(np.linalg.norm(grad - eq.lambda_bar)),
        "step": h,
    }
