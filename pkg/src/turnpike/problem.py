"""Optimal control problem model.

An :class:`OcpProblem` bundles dynamics, stage cost, Mayer term, path and
terminal constraints, horizon and initial state for either a discrete-time
problem (``dynamics`` returns the successor state) or a continuous-time
problem (``dynamics`` returns the time derivative).

Conventions used throughout the package:

* Minimization.  The Hamiltonian is ``H = l(x,u) + lam @ f(x,u) + mu @ G(x,u)``
  with the abnormal multiplier fixed to one; abnormal problems are rejected.
* The costate ``lam`` is the multiplier of the dynamics constraint with the
  terminal condition ``lam(T) = phi_x + psi_x^T mu``.  In discrete time the
  stage Lagrangian pairs ``lam(t+1)`` with ``f(x(t), u(t)) - x(t+1)``, so the
  costate sequence is indexed ``0..T`` with the recursion
  ``lam(t) = f_x^T lam(t+1) + l_x + G_x^T mu(t)``.
* Inequalities are feasible iff ``<= 0``.  Box bounds on inputs and states
  are structural fields; they are stacked behind the generic path constraint
  ``g`` into one combined inequality map ``G`` in the fixed order
  ``[g, u_lo, u_hi, x_lo, x_hi]`` (only finite bound components contribute
  rows).  Multiplier vectors ``mu`` follow this ordering everywhere.

All user callables may be either pointwise (``x.shape == (nx,)``) or
vectorized over a leading batch axis; vectorization is probed once at
construction and a loop fallback is installed when needed.  Missing
derivative oracles are replaced by central finite differences with step
``cbrt(eps) * max(1, |value|)`` per component.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable, Optional, Sequence

import numpy as np

from .errors import ConfigError, DimensionError

_FD_STEP = float(np.cbrt(np.finfo(float).eps))


@dataclass(frozen=True)
class KFunction:
    """Class-K-infinity representative ``r -> c * r**p`` with c > 0, p >= 1."""

    coefficient: float
    exponent: float = 2.0

    def __post_init__(self):
        if not self.coefficient > 0:
            raise ConfigError("KFunction coefficient must be positive")
        if not self.exponent >= 1:
            raise ConfigError("KFunction exponent must be >= 1")

    def __call__(self, r):
        r = np.asarray(r, dtype=float)
        return self.coefficient * np.power(r, self.exponent)


@dataclass(frozen=True)
class DerivativeOracles:
    """Optional analytic derivatives; any subset may be supplied.

    Shapes for a single point: ``f_x (nx,nx)``, ``f_u (nx,nu)``,
    ``l_x (nx,)``, ``l_u (nu,)``, ``g_x (ng,nx)``, ``g_u (ng,nu)``,
    ``phi_x (nx,)``, ``psi_x (npsi,nx)``.  Batched calls prepend an axis.
    """

    f_x: Optional[Callable] = None
    f_u: Optional[Callable] = None
    l_x: Optional[Callable] = None
    l_u: Optional[Callable] = None
    g_x: Optional[Callable] = None
    g_u: Optional[Callable] = None
    phi_x: Optional[Callable] = None
    psi_x: Optional[Callable] = None


def _atleast_batch(arr, width):
    """View ``arr`` as (m, width); report whether the input was unbatched."""
    a = np.asarray(arr, dtype=float)
    if a.ndim == 1:
        if a.shape[0] != width:
            raise ValueError(f"expected width {width}, got {a.shape}")
        return a[None, :], True
    if a.ndim == 2 and a.shape[1] == width:
        return a, False
    raise ValueError(f"expected shape (m,{width}) or ({width},), got {a.shape}")


class _BatchedFn:
    """Adapter giving every user callable a uniform batched signature.

    ``out_shape`` is the trailing shape of a single-point result, e.g. ``()``
    for costs, ``(nx,)`` for dynamics, ``(ng, nx)`` for Jacobians.
    """

    def __init__(self, fn, arg_widths, out_shape, vectorized):
        self.fn = fn
        self.arg_widths = arg_widths
        self.out_shape = tuple(out_shape)
        self.vectorized = vectorized

    def __call__(self, *args):
        batched = [_atleast_batch(a, w)[0] for a, w in zip(args, self.arg_widths)]
        m = batched[0].shape[0]
        if self.vectorized:
            out = np.asarray(self.fn(*batched), dtype=float)
            return out.reshape((m,) + self.out_shape)
        rows = [
            np.asarray(self.fn(*(b[i] for b in batched)), dtype=float)
            for i in range(m)
        ]
        return np.asarray(rows, dtype=float).reshape((m,) + self.out_shape)


def _probe_vectorized(fn, points, out_shape):
    """True when fn applied to a stacked batch reproduces row-wise results."""
    try:
        batch = np.asarray(fn(*points), dtype=float)
    except Exception:
        return False
    m = points[0].shape[0]
    if batch.shape != (m,) + tuple(out_shape):
        return False
    try:
        rows = np.asarray(
            [fn(*(p[i] for p in points)) for i in range(m)], dtype=float
        ).reshape((m,) + tuple(out_shape))
    except Exception:
        return False
    return bool(np.allclose(batch, rows, rtol=1e-12, atol=1e-12))


def _adapt(fn, arg_widths, out_shape, probe_args):
    vectorized = _probe_vectorized(fn, probe_args, out_shape)
    return _BatchedFn(fn, arg_widths, out_shape, vectorized)


def _fd_jacobian(fn, argno, widths):
    """Central-difference Jacobian of a batched fn w.r.t. argument argno."""

    def jac(*args):
        batched = [_atleast_batch(a, w)[0] for a, w in zip(args, widths)]
        m = batched[0].shape[0]
        base = np.asarray(fn(*batched), dtype=float).reshape(m, -1)
        n_out = base.shape[1]
        n_in = widths[argno]
        out = np.empty((m, n_out, n_in))
        target = batched[argno]
        for j in range(n_in):
            h = _FD_STEP * np.maximum(1.0, np.abs(target[:, j]))
            hi = [b.copy() if i == argno else b for i, b in enumerate(batched)]
            lo = [b.copy() if i == argno else b for i, b in enumerate(batched)]
            hi[argno][:, j] += h
            lo[argno][:, j] -= h
            fhi = np.asarray(fn(*hi), dtype=float).reshape(m, -1)
            flo = np.asarray(fn(*lo), dtype=float).reshape(m, -1)
            out[:, :, j] = (fhi - flo) / (2.0 * h)[:, None]
        return out

    return jac


def _normalize_box(bound, width, name):
    if bound is None:
        return None
    lo, hi = bound
    lo = np.full(width, -np.inf) if lo is None else np.broadcast_to(
        np.asarray(lo, dtype=float), (width,)
    ).copy()
    hi = np.full(width, np.inf) if hi is None else np.broadcast_to(
        np.asarray(hi, dtype=float), (width,)
    ).copy()
    if np.any(lo >= hi):
        raise ConfigError(f"{name} lower bounds must be below upper bounds")
    if not np.any(np.isfinite(lo)) and not np.any(np.isfinite(hi)):
        return None
    return lo, hi


class OcpProblem:
    """Finite-horizon optimal control problem.

    Parameters
    ----------
    state_dim, input_dim : int
        Dimensions of the state and input vectors.
    dynamics : callable ``(x, u) -> x_next`` (discrete) or ``-> dx/dt``.
    stage_cost : callable ``(x, u) -> float``.
    horizon : positive int (discrete) or positive float (continuous).
    initial_state : array of shape (state_dim,).
    time_mode : "discrete" or "continuous".
    mayer_cost : optional callable ``x -> float`` (defaults to 0).
    path_constraints : optional callable ``(x, u) -> (ng,)``, feasible iff <= 0.
    terminal_constraints : optional callable ``x -> (npsi,)``, <= 0.
    terminal_equalities : indices of terminal constraint rows treated as == 0.
    u_box, x_box : optional ``(lo, hi)`` bounds; ``None`` entries are free.
        Input bounds hold on every interval, state bounds at every node.
    derivative_oracles : optional :class:`DerivativeOracles`.
    name : optional identifier used in serialized artifacts.
    """

    def __init__(
        self,
        state_dim: int,
        input_dim: int,
        dynamics: Callable,
        stage_cost: Callable,
        horizon,
        initial_state,
        time_mode: str = "continuous",
        mayer_cost: Optional[Callable] = None,
        path_constraints: Optional[Callable] = None,
        n_path_constraints: Optional[int] = None,
        terminal_constraints: Optional[Callable] = None,
        n_terminal_constraints: Optional[int] = None,
        terminal_equalities: Sequence[int] = (),
        u_box=None,
        x_box=None,
        derivative_oracles: Optional[DerivativeOracles] = None,
        name: str = "ocp",
    ):
        if state_dim < 1 or input_dim < 1:
            raise ConfigError("state_dim and input_dim must be positive")
        if time_mode not in ("discrete", "continuous"):
            raise ConfigError(f"unknown time_mode {time_mode!r}")
        if time_mode == "discrete":
            if int(horizon) != horizon or horizon < 1:
                raise ConfigError("discrete horizon must be a positive integer")
            horizon = int(horizon)
        else:
            horizon = float(horizon)
            if not horizon > 0:
                raise ConfigError("continuous horizon must be positive")

        self.state_dim = int(state_dim)
        self.input_dim = int(input_dim)
        self.time_mode = time_mode
        self.horizon = horizon
        self.name = name
        self.initial_state = np.asarray(initial_state, dtype=float).reshape(-1).copy()
        if self.initial_state.shape != (self.state_dim,):
            raise DimensionError("initial_state", (self.state_dim,), self.initial_state.shape)
        self.initial_state.setflags(write=False)

        self.u_box = _normalize_box(u_box, input_dim, "u_box")
        self.x_box = _normalize_box(x_box, state_dim, "x_box")

        self._raw = dict(
            dynamics=dynamics,
            stage_cost=stage_cost,
            mayer_cost=mayer_cost,
            path_constraints=path_constraints,
            terminal_constraints=terminal_constraints,
        )
        self.terminal_equalities = tuple(sorted(set(int(i) for i in terminal_equalities)))
        self.derivative_oracles = derivative_oracles or DerivativeOracles()

        # Probe points: a small feasible-ish batch around the initial state.
        x_ref = self.clamp_state(self.initial_state)
        u_ref = self.input_midpoint()
        xs = np.vstack([x_ref, x_ref * 1.01 + 0.01, x_ref * 0.99 - 0.01])
        us = np.vstack([u_ref, u_ref + 0.01, u_ref - 0.01])
        us = self.clamp_input(us)
        xs = self.clamp_state(xs)

        nx, nu = self.state_dim, self.input_dim
        probe_x = np.asarray(dynamics(xs[0], us[0]), dtype=float).reshape(-1)
        if probe_x.shape != (nx,):
            raise DimensionError("dynamics output", (nx,), probe_x.shape)
        self.dyn = _adapt(dynamics, (nx, nu), (nx,), (xs, us))
        self.cost = _adapt(stage_cost, (nx, nu), (), (xs, us))
        if mayer_cost is not None:
            self.mayer = _adapt(mayer_cost, (nx,), (), (xs,))
        else:
            self.mayer = _BatchedFn(lambda x: np.zeros(np.shape(x)[0]), (nx,), (), True)

        if path_constraints is not None:
            probe_g = np.asarray(path_constraints(xs[0], us[0]), dtype=float).reshape(-1)
            self.n_g = probe_g.size if n_path_constraints is None else int(n_path_constraints)
            self.g = _adapt(path_constraints, (nx, nu), (self.n_g,), (xs, us))
        else:
            self.n_g = 0
            self.g = None

        if terminal_constraints is not None:
            probe_psi = np.asarray(terminal_constraints(xs[0]), dtype=float).reshape(-1)
            self.n_psi = probe_psi.size if n_terminal_constraints is None else int(n_terminal_constraints)
            self.psi = _adapt(terminal_constraints, (nx,), (self.n_psi,), (xs,))
        else:
            self.n_psi = 0
            self.psi = None
        if any(i < 0 or i >= self.n_psi for i in self.terminal_equalities):
            raise ConfigError("terminal_equalities indices out of range")

        # Derivatives: oracle if supplied, else central finite differences.
        oc = self.derivative_oracles
        self.f_x = (
            _adapt(oc.f_x, (nx, nu), (nx, nx), (xs, us))
            if oc.f_x is not None
            else _fd_jacobian(self.dyn, 0, (nx, nu))
        )
        self.f_u = (
            _adapt(oc.f_u, (nx, nu), (nx, nu), (xs, us))
            if oc.f_u is not None
            else _fd_jacobian(self.dyn, 1, (nx, nu))
        )
        _cost_vec = _BatchedFn(lambda x, u: self.cost(x, u), (nx, nu), (), True)

        def _grad_of_scalar(jac):
            return lambda x, u: jac(x, u)[:, 0, :]

        self.l_x = (
            _adapt(oc.l_x, (nx, nu), (nx,), (xs, us))
            if oc.l_x is not None
            else _grad_of_scalar(_fd_jacobian(lambda x, u: self.cost(x, u)[:, None], 0, (nx, nu)))
        )
        self.l_u = (
            _adapt(oc.l_u, (nx, nu), (nu,), (xs, us))
            if oc.l_u is not None
            else _grad_of_scalar(_fd_jacobian(lambda x, u: self.cost(x, u)[:, None], 1, (nx, nu)))
        )
        self.phi_x = (
            _adapt(oc.phi_x, (nx,), (nx,), (xs,))
            if oc.phi_x is not None
            else (lambda x: _fd_jacobian(lambda y: self.mayer(y)[:, None], 0, (nx,))(x)[:, 0, :])
        )
        if self.g is not None:
            self.g_x = (
                _adapt(oc.g_x, (nx, nu), (self.n_g, nx), (xs, us))
                if oc.g_x is not None
                else _fd_jacobian(self.g, 0, (nx, nu))
            )
            self.g_u = (
                _adapt(oc.g_u, (nx, nu), (self.n_g, nu), (xs, us))
                if oc.g_u is not None
                else _fd_jacobian(self.g, 1, (nx, nu))
            )
        else:
            self.g_x = self.g_u = None
        if self.psi is not None:
            self.psi_x = (
                _adapt(oc.psi_x, (nx,), (self.n_psi, nx), (xs,))
                if oc.psi_x is not None
                else _fd_jacobian(self.psi, 0, (nx,))
            )
        else:
            self.psi_x = None

        # Combined inequality bookkeeping [g, u_lo, u_hi, x_lo, x_hi].
        labels = [("g", j) for j in range(self.n_g)]
        self._u_lo_idx = self._u_hi_idx = np.array([], dtype=int)
        self._x_lo_idx = self._x_hi_idx = np.array([], dtype=int)
        if self.u_box is not None:
            lo, hi = self.u_box
            self._u_lo_idx = np.where(np.isfinite(lo))[0]
            self._u_hi_idx = np.where(np.isfinite(hi))[0]
            labels += [("u_lo", int(j)) for j in self._u_lo_idx]
            labels += [("u_hi", int(j)) for j in self._u_hi_idx]
        if self.x_box is not None:
            lo, hi = self.x_box
            self._x_lo_idx = np.where(np.isfinite(lo))[0]
            self._x_hi_idx = np.where(np.isfinite(hi))[0]
            labels += [("x_lo", int(j)) for j in self._x_lo_idx]
            labels += [("x_hi", int(j)) for j in self._x_hi_idx]
        self.ineq_labels = tuple(labels)
        self.n_ineq = len(labels)
        self.n_terminal_box = self._x_lo_idx.size + self._x_hi_idx.size

    # -- box helpers ------------------------------------------------------

    def clamp_state(self, x):
        x = np.asarray(x, dtype=float)
        if self.x_box is None:
            return x.copy()
        lo, hi = self.x_box
        return np.clip(x, lo, hi)

    def clamp_input(self, u):
        u = np.asarray(u, dtype=float)
        if self.u_box is None:
            return u.copy()
        lo, hi = self.u_box
        return np.clip(u, lo, hi)

    def input_midpoint(self) -> np.ndarray:
        """Midpoint of the input box; zero along unbounded directions."""
        if self.u_box is None:
            return np.zeros(self.input_dim)
        lo, hi = self.u_box
        mid = np.where(
            np.isfinite(lo) & np.isfinite(hi),
            0.5 * (lo + hi),
            np.where(np.isfinite(lo), lo, np.where(np.isfinite(hi), hi, 0.0)),
        )
        return np.where(np.isfinite(mid), mid, 0.0)

    # -- combined inequality map ------------------------------------------

    def ineq(self, x, u) -> np.ndarray:
        """Stacked path inequality values at (x, u); shape (m, n_ineq)."""
        xb, _ = _atleast_batch(x, self.state_dim)
        ub, _ = _atleast_batch(u, self.input_dim)
        parts = []
        if self.g is not None:
            parts.append(self.g(xb, ub))
        if self.u_box is not None:
            lo, hi = self.u_box
            if self._u_lo_idx.size:
                parts.append(lo[self._u_lo_idx] - ub[:, self._u_lo_idx])
            if self._u_hi_idx.size:
                parts.append(ub[:, self._u_hi_idx] - hi[self._u_hi_idx])
        if self.x_box is not None:
            lo, hi = self.x_box
            if self._x_lo_idx.size:
                parts.append(lo[self._x_lo_idx] - xb[:, self._x_lo_idx])
            if self._x_hi_idx.size:
                parts.append(xb[:, self._x_hi_idx] - hi[self._x_hi_idx])
        if not parts:
            return np.zeros((xb.shape[0], 0))
        return np.concatenate(parts, axis=1)

    def ineq_jacobians(self, x, u):
        """Jacobians of :meth:`ineq` w.r.t. x and u; shapes (m,nG,nx),(m,nG,nu)."""
        xb, _ = _atleast_batch(x, self.state_dim)
        ub, _ = _atleast_batch(u, self.input_dim)
        m = xb.shape[0]
        nG = self.n_ineq
        Jx = np.zeros((m, nG, self.state_dim))
        Ju = np.zeros((m, nG, self.input_dim))
        row = 0
        if self.g is not None:
            Jx[:, row : row + self.n_g] = self.g_x(xb, ub)
            Ju[:, row : row + self.n_g] = self.g_u(xb, ub)
            row += self.n_g
        for j in self._u_lo_idx:
            Ju[:, row, j] = -1.0
            row += 1
        for j in self._u_hi_idx:
            Ju[:, row, j] = 1.0
            row += 1
        for j in self._x_lo_idx:
            Jx[:, row, j] = -1.0
            row += 1
        for j in self._x_hi_idx:
            Jx[:, row, j] = 1.0
            row += 1
        return Jx, Ju

    def terminal_box(self, x) -> np.ndarray:
        """State-box rows evaluated at a terminal node; shape (m, n_terminal_box)."""
        xb, _ = _atleast_batch(x, self.state_dim)
        parts = []
        if self.x_box is not None:
            lo, hi = self.x_box
            if self._x_lo_idx.size:
                parts.append(lo[self._x_lo_idx] - xb[:, self._x_lo_idx])
            if self._x_hi_idx.size:
                parts.append(xb[:, self._x_hi_idx] - hi[self._x_hi_idx])
        if not parts:
            return np.zeros((xb.shape[0], 0))
        return np.concatenate(parts, axis=1)

    def terminal_box_jacobian(self, x) -> np.ndarray:
        xb, _ = _atleast_batch(x, self.state_dim)
        m = xb.shape[0]
        J = np.zeros((m, self.n_terminal_box, self.state_dim))
        row = 0
        for j in self._x_lo_idx:
            J[:, row, j] = -1.0
            row += 1
        for j in self._x_hi_idx:
            J[:, row, j] = 1.0
            row += 1
        return J

    def in_constraint_set(self, x, u, slack: float = 1e-9):
        """Componentwise membership test for the combined inequality map."""
        vals = self.ineq(x, u)
        return np.all(vals <= slack, axis=1)

    # -- misc ---------------------------------------------------------------

    def with_(self, **changes) -> "OcpProblem":
        """Copy with selected constructor arguments replaced."""
        kwargs = dict(
            state_dim=self.state_dim,
            input_dim=self.input_dim,
            dynamics=self._raw["dynamics"],
            stage_cost=self._raw["stage_cost"],
            horizon=self.horizon,
            initial_state=self.initial_state,
            time_mode=self.time_mode,
            mayer_cost=self._raw["mayer_cost"],
            path_constraints=self._raw["path_constraints"],
            terminal_constraints=self._raw["terminal_constraints"],
            terminal_equalities=self.terminal_equalities,
            u_box=self.u_box,
            x_box=self.x_box,
            derivative_oracles=self.derivative_oracles,
            name=self.name,
        )
        kwargs.update(changes)
        return OcpProblem(**kwargs)

    def __repr__(self):
        return (
            f"OcpProblem({self.name!r}, nx={self.state_dim}, nu={self.input_dim}, "
            f"{self.time_mode}, T={self.horizon}, x0={self.initial_state.tolist()})"
        )


def hamiltonian(problem: OcpProblem, x, u, lam, mu) -> float:
    """Evaluate ``l(x,u) + lam @ f(x,u) + mu @ G(x,u)`` at a single point.

    ``mu`` must be nonnegative and sized to the combined inequality map
    (``problem.n_ineq``); pass an empty array for unconstrained problems.
    """
    x = np.asarray(x, dtype=float).reshape(-1)
    u = np.asarray(u, dtype=float).reshape(-1)
    lam = np.asarray(lam, dtype=float).reshape(-1)
    mu = np.asarray(mu, dtype=float).reshape(-1)
    if x.shape != (problem.state_dim,):
        raise DimensionError("x", (problem.state_dim,), x.shape)
    if u.shape != (problem.input_dim,):
        raise DimensionError("u", (problem.input_dim,), u.shape)
    if lam.shape != (problem.state_dim,):
        raise DimensionError("lambda", (problem.state_dim,), lam.shape)
    if mu.shape != (problem.n_ineq,):
        raise DimensionError("mu", (problem.n_ineq,), mu.shape)
    if np.any(mu < 0):
        raise ConfigError("mu must be componentwise nonnegative")
    value = float(problem.cost(x, u)[0]) + float(lam @ problem.dyn(x, u)[0])
    if problem.n_ineq:
        value += float(mu @ problem.ineq(x, u)[0])
    return value


def check_derivative_consistency(problem: OcpProblem, n_points: int = 5, seed: int = 0,
                                 rtol: float = 1e-5) -> float:
    """Worst relative gap between supplied oracles and finite differences.

    Only oracles actually present are compared.  Returns the worst relative
    deviation over random feasible-box points (0.0 when nothing to compare).
    """
    rng = np.random.default_rng(seed)
    nx, nu = problem.state_dim, problem.input_dim
    x0 = problem.clamp_state(problem.initial_state)
    scale = 1.0 + np.abs(x0)
    xs = problem.clamp_state(x0 + 0.3 * scale * rng.standard_normal((n_points, nx)))
    us = problem.clamp_input(
        problem.input_midpoint() + 0.3 * rng.standard_normal((n_points, nu))
    )
    oc = problem.derivative_oracles
    worst = 0.0

    def compare(oracle_fn, fd_fn, args):
        nonlocal worst
        a = np.asarray(oracle_fn(*args), dtype=float)
        b = np.asarray(fd_fn(*args), dtype=float).reshape(a.shape)
        denom = np.maximum(1.0, np.abs(a))
        worst = max(worst, float(np.max(np.abs(a - b) / denom)))

    if oc.f_x is not None:
        compare(problem.f_x, _fd_jacobian(problem.dyn, 0, (nx, nu)), (xs, us))
    if oc.f_u is not None:
        compare(problem.f_u, _fd_jacobian(problem.dyn, 1, (nx, nu)), (xs, us))
    if oc.l_x is not None:
        compare(problem.l_x,
                lambda x, u: _fd_jacobian(lambda a, b: problem.cost(a, b)[:, None], 0, (nx, nu))(x, u)[:, 0, :],
                (xs, us))
    if oc.l_u is not None:
        compare(problem.l_u,
                lambda x, u: _fd_jacobian(lambda a, b: problem.cost(a, b)[:, None], 1, (nx, nu))(x, u)[:, 0, :],
                (xs, us))
    if oc.g_x is not None and problem.g is not None:
        compare(problem.g_x, _fd_jacobian(problem.g, 0, (nx, nu)), (xs, us))
    if oc.g_u is not None and problem.g is not None:
        compare(problem.g_u, _fd_jacobian(problem.g, 1, (nx, nu)), (xs, us))
    if oc.phi_x is not None:
        compare(problem.phi_x,
                lambda x: _fd_jacobian(lambda a: problem.mayer(a)[:, None], 0, (nx,))(x)[:, 0, :],
                (xs,))
    if oc.psi_x is not None and problem.psi is not None:
        compare(problem.psi_x, _fd_jacobian(problem.psi, 0, (nx,)), (xs,))
    if worst > rtol:
        raise ConfigError(
            f"supplied derivative oracle disagrees with finite differences: "
            f"relative gap {worst:.2e} > {rtol:.0e}"
        )
    return worst
