"""Strict-dissipativity certificates and value-function bounds.

A certificate is a storage function S (linear or quadratic) together with a
power-law class-K function alpha.  The dissipation inequality is checked

* pointwise for discrete problems:  ``S(f(x,u)) - S(x) <= w(x,u) - alpha(arg)``
* pointwise in differential form for continuous problems sampled on a grid:
  ``grad S(x) . f(x,u) <= w(x,u) - alpha(arg)``
* in cumulative integral form along continuous trajectories, at every node
  prefix, with trapezoid quadrature.

Here ``w(x,u) = l(x,u) - l(x_bar, u_bar)`` is the supply rate and ``arg``
is ``  ||x-x_bar|| + ||u-u_bar||`` (input-state strict) or ``||x-x_bar||``
(state strict) depending on the strictness mode.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from .equilibrium import Equilibrium
from .errors import ConfigError, DimensionError
from .problem import KFunction, OcpProblem
from .solution import Solution
from .transcribe import transcribe


@dataclass(frozen=True)
class StorageFunction:
    """Linear ``p.x + s`` or quadratic ``x.P.x/2 + p.x + s`` storage.

    The lower bound over a working box is certified conservatively: the
    quadratic part is bounded below through its smallest eigenvalue and the
    remaining separable function is minimized per coordinate over the box
    (exact for the linear case, which reduces to vertex evaluation).
    """

    p: np.ndarray
    P: Optional[np.ndarray] = None
    offset: float = 0.0
    working_box: Optional[tuple] = None

    def __post_init__(self):
        p = np.asarray(self.p, dtype=float).reshape(-1).copy()
        p.setflags(write=False)
        object.__setattr__(self, "p", p)
        if self.P is not None:
            P = np.asarray(self.P, dtype=float)
            if P.shape != (p.size, p.size):
                raise DimensionError("P", (p.size, p.size), P.shape)
            if not np.allclose(P, P.T, atol=1e-12):
                raise ConfigError("quadratic storage matrix must be symmetric")
            P = 0.5 * (P + P.T)
            P.setflags(write=False)
            object.__setattr__(self, "P", P)
        if self.working_box is not None:
            lo, hi = self.working_box
            lo = np.broadcast_to(np.asarray(lo, dtype=float), (p.size,)).copy()
            hi = np.broadcast_to(np.asarray(hi, dtype=float), (p.size,)).copy()
            if np.any(lo >= hi):
                raise ConfigError("working box must have lo < hi")
            object.__setattr__(self, "working_box", (lo, hi))

    @classmethod
    def zero(cls, state_dim: int, working_box=None) -> "StorageFunction":
        return cls(p=np.zeros(state_dim), working_box=working_box)

    @classmethod
    def linear_from_equilibrium(cls, eq: Equilibrium, working_box=None) -> "StorageFunction":
        """Gradient equals the negated steady costate.

        This is the classical linear storage candidate: along trajectories
        its derivative subtracts the costate-weighted dynamics, which makes
        the rotated stage cost stationary at the equilibrium (equivalently,
        the value-function gradient at the equilibrium equals the steady
        costate and the storage gradient is its negative).
        """
        return cls(p=-eq.lambda_bar.copy(), working_box=working_box)

    @classmethod
    def quadratic(cls, P, p=None, offset=0.0, working_box=None) -> "StorageFunction":
        P = np.asarray(P, dtype=float)
        n = P.shape[0]
        return cls(p=np.zeros(n) if p is None else p, P=P, offset=offset,
                   working_box=working_box)

    @property
    def state_dim(self) -> int:
        return self.p.size

    def __call__(self, x) -> np.ndarray:
        x = np.atleast_2d(np.asarray(x, dtype=float))
        val = x @ self.p + self.offset
        if self.P is not None:
            val = val + 0.5 * np.einsum("mi,ij,mj->m", x, self.P, x)
        return val

    def gradient(self, x) -> np.ndarray:
        x = np.atleast_2d(np.asarray(x, dtype=float))
        g = np.broadcast_to(self.p, x.shape).copy()
        if self.P is not None:
            g = g + x @ self.P
        return g

    def lower_bound(self) -> float:
        """Certified lower bound over the working box (conservative)."""
        if self.working_box is None:
            raise ConfigError("storage has no working box; cannot certify a lower bound")
        lo, hi = self.working_box
        lam_min = 0.0
        if self.P is not None:
            lam_min = float(np.linalg.eigvalsh(self.P)[0])
        # separable underestimate: sum_i (lam_min x_i^2 / 2 + p_i x_i)
        total = self.offset
        for i in range(self.state_dim):
            c2, c1 = 0.5 * lam_min, self.p[i]
            cands = [c2 * lo[i] ** 2 + c1 * lo[i], c2 * hi[i] ** 2 + c1 * hi[i]]
            if c2 > 0:
                xstar = -c1 / (2 * c2)
                if lo[i] <= xstar <= hi[i]:
                    cands.append(c2 * xstar ** 2 + c1 * xstar)
            total += min(cands)
        return float(total)

    def as_dict(self) -> dict:
        return {
            "p": self.p.tolist(),
            "P": None if self.P is None else self.P.tolist(),
            "offset": self.offset,
            "working_box": None
            if self.working_box is None
            else [self.working_box[0].tolist(), self.working_box[1].tolist()],
        }


@dataclass(frozen=True)
class ViolationReport:
    samples_checked: int
    worst_residual: float          # positive = violated, negative = margin
    worst_location: dict
    passed: bool
    tolerance: float
    rejected_samples: tuple = ()
    mode: str = "input_state"

    def to_json_dict(self) -> dict:
        loc = {
            k: (v.tolist() if isinstance(v, np.ndarray) else v)
            for k, v in self.worst_location.items()
        }
        return {
            "samples_checked": self.samples_checked,
            "worst_residual": self.worst_residual,
            "worst_location": loc,
            "passed": self.passed,
            "tolerance": self.tolerance,
            "n_rejected": len(self.rejected_samples),
            "mode": self.mode,
        }

    def to_json(self, path, header: Optional[dict] = None):
        doc = self.to_json_dict()
        if header:
            doc["header"] = header
        with open(path, "w") as fh:
            json.dump(doc, fh, indent=1)
            fh.write("\n")


def supply_rate(problem: OcpProblem, eq: Equilibrium):
    """The shifted stage cost ``w(x, u) = l(x, u) - l(x_bar, u_bar)``.

    Computed as an exact difference against the stored equilibrium cost, so
    ``w(x_bar, u_bar) == 0`` without re-rounding.
    """
    base = eq.cost

    def w(x, u):
        return problem.cost(x, u) - base

    return w


def _distance_arg(eq: Equilibrium, X, U, mode: str):
    dx = np.linalg.norm(X - eq.x_bar[None, :], axis=1)
    if mode == "state":
        return dx
    return dx + np.linalg.norm(U - eq.u_bar[None, :], axis=1)


def _grid_samples(problem: OcpProblem, spec) -> tuple:
    """Cartesian sample grid from ``((x_lo, x_hi, n), (u_lo, u_hi, n))``."""
    (x_lo, x_hi, nx_pts), (u_lo, u_hi, nu_pts) = spec
    axes_x = [
        np.linspace(lo, hi, nx_pts)
        for lo, hi in zip(np.atleast_1d(x_lo), np.atleast_1d(x_hi))
    ]
    axes_u = [
        np.linspace(lo, hi, nu_pts)
        for lo, hi in zip(np.atleast_1d(u_lo), np.atleast_1d(u_hi))
    ]
    grids = np.meshgrid(*axes_x, *axes_u, indexing="ij")
    flat = [g.ravel() for g in grids]
    X = np.column_stack(flat[: problem.state_dim])
    U = np.column_stack(flat[problem.state_dim :])
    return X, U


def check_dissipation(problem: OcpProblem, eq: Equilibrium, storage: StorageFunction,
                      alpha: KFunction, samples, mode: str = "input_state",
                      feasibility_slack: float = 1e-9) -> ViolationReport:
    """Check the dissipation inequality on a trajectory or a sample grid.

    ``samples`` is either a :class:`Solution` (trajectory; continuous
    problems use the cumulative integral form at every node prefix) or a
    grid spec ``((x_lo, x_hi, n_x), (u_lo, u_hi, n_u))`` (pointwise form).
    Samples outside the constraint set are rejected, not checked.
    """
    if mode not in ("state", "input_state"):
        raise ConfigError("mode must be 'state' or 'input_state'")
    w = supply_rate(problem, eq)
    tolerance = 1e-8 * (1.0 + abs(eq.cost))

    if isinstance(samples, Solution):
        sol = samples
        X, U = sol.states, sol.inputs
        Xl = X[:-1]
        member = problem.in_constraint_set(Xl, U, slack=feasibility_slack)
        rejected = tuple(int(i) for i in np.where(~member)[0])
        wa = w(Xl, U) - alpha(_distance_arg(eq, Xl, U, mode))
        if problem.time_mode == "discrete":
            res = storage(X[1:]) - storage(Xl) - wa
            worst = int(np.argmax(res))
            location = {"node": worst, "x": Xl[worst], "u": U[worst]}
            worst_val = float(res[worst])
            checked = Xl.shape[0]
        else:
            # cumulative trapezoid of (w - alpha) vs storage increments
            h = np.diff(sol.grid.nodes)
            wa_right = w(X[1:], U) - alpha(_distance_arg(eq, X[1:], U, mode))
            seg = 0.5 * h * (wa + wa_right)
            rhs = np.concatenate([[0.0], np.cumsum(seg)])
            lhs = storage(X) - storage(X[:1])
            res = lhs - rhs
            worst = int(np.argmax(res))
            location = {"node": worst, "t": float(sol.grid.nodes[worst]), "x": X[worst]}
            worst_val = float(res[worst])
            checked = X.shape[0]
    else:
        X, U = _grid_samples(problem, samples)
        member = problem.in_constraint_set(X, U, slack=feasibility_slack)
        rejected = tuple(int(i) for i in np.where(~member)[0])
        X, U = X[member], U[member]
        if X.shape[0] == 0:
            raise ConfigError("all grid samples lie outside the constraint set")
        wa = w(X, U) - alpha(_distance_arg(eq, X, U, mode))
        if problem.time_mode == "discrete":
            res = storage(problem.dyn(X, U)) - storage(X) - wa
        else:
            res = np.einsum("mi,mi->m", storage.gradient(X), problem.dyn(X, U)) - wa
        worst = int(np.argmax(res))
        location = {"index": worst, "x": X[worst], "u": U[worst]}
        worst_val = float(res[worst])
        checked = X.shape[0]

    return ViolationReport(
        samples_checked=checked,
        worst_residual=worst_val,
        worst_location=location,
        passed=bool(worst_val <= tolerance),
        tolerance=tolerance,
        rejected_samples=rejected,
        mode=mode,
    )


def largest_passing_alpha(problem: OcpProblem, eq: Equilibrium, storage: StorageFunction,
                          samples, exponent: float = 2.0, mode: str = "input_state",
                          c_hi: float = 1e3, iterations: int = 60) -> float:
    """Bisect the largest power-law coefficient that still passes the check.

    Returns 0.0 when even a vanishing coefficient fails (the storage does
    not certify dissipativity on these samples).
    """
    def passes(c):
        if c <= 0:
            raise ValueError
        rep = check_dissipation(problem, eq, storage, KFunction(c, exponent), samples, mode)
        return rep.passed

    lo_c, hi_c = 0.0, None
    c = 1e-8
    if not passes(c):
        return 0.0
    while c < c_hi:
        if passes(c):
            lo_c = c
            c *= 10
        else:
            hi_c = c
            break
    if hi_c is None:
        return float(lo_c)
    for _ in range(iterations):
        mid = 0.5 * (lo_c + hi_c)
        if passes(mid):
            lo_c = mid
        else:
            hi_c = mid
    return float(lo_c)


def value_bound_check(batch: Sequence[Solution], eq: Equilibrium,
                      storage: StorageFunction, alpha: KFunction, epsilon: float,
                      mode: str = "input_state", tolerance: float = 1e-6) -> dict:
    """Check the dissipativity-based value bounds over a horizon batch.

    (i) lower bound per member:``V >= T l(eq) - S(x0) + inf S + m(eps) alpha(eps)``
    where ``V`` is the running-cost part of the objective and ``m(eps)``
    the measured exit size; (ii) the horizon-offset estimate
    ``C = max(V_full - T l(eq))`` with a flatness verdict (spread at most
    10 percent of ``|C| + 1``).
    """
    from .analysis import exit_measure  # local import to avoid a cycle

    if len({float(s.grid.horizon) for s in batch}) < 3:
        raise ConfigError("batch must span at least three horizons")
    x0s = {tuple(np.round(s.states[0], 10)) for s in batch}
    if len(x0s) != 1:
        raise ConfigError("batch members must share the initial state")
    s_lower = storage.lower_bound()

    sel = "state" if mode == "state" else "input_state"
    members = []
    all_lower_ok = True
    offsets = []
    for sol in batch:
        horizon = sol.grid.horizon
        running = sol.objective - _mayer_of(sol)
        m_eps = exit_measure(sol, eq, sel, epsilon)["size"]
        bound = (
            horizon * eq.cost
            - float(storage(sol.states[0])[0])
            + s_lower
            + m_eps * float(alpha(epsilon))
        )
        ok = running >= bound - tolerance * (1.0 + abs(running))
        all_lower_ok = all_lower_ok and bool(ok)
        offsets.append(sol.objective - horizon * eq.cost)
        members.append(
            {
                "horizon": horizon,
                "running_cost": running,
                "lower_bound": bound,
                "margin": running - bound,
                "exit_size": m_eps,
                "lower_ok": bool(ok),
            }
        )
    c_tilde = float(np.max(offsets))
    spread = float(np.max(offsets) - np.min(offsets))
    flat = spread <= 0.1 * (abs(c_tilde) + 1.0)
    return {
        "members": members,
        "lower_bounds_ok": all_lower_ok,
        "c_tilde": c_tilde,
        "offset_spread": spread,
        "horizon_flat": bool(flat),
        "storage_lower_bound": s_lower,
        "epsilon": epsilon,
    }


def _mayer_of(sol: Solution) -> float:
    return float(sol.metadata.get("mayer_value", 0.0))
