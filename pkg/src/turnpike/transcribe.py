"""Direct transcription of an OCP onto a time grid.

Continuous problems use one classical RK4 step per interval for the
dynamics defects and per-interval trapezoid quadrature of the stage cost
with piecewise-constant inputs; discrete problems map one-to-one.  The
decision vector stacks all node states first, then all interval inputs:

    z = [x_0, ..., x_N, u_0, ..., u_{N-1}]

Equality rows are ordered [initial condition, defects 0..N-1, terminal
equalities]; inequality rows are [combined path rows per interval, terminal
inequality constraints, terminal state-box rows].  Row counts and sparsity
are functions of (problem, grid) only.
"""

from __future__ import annotations

import numpy as np

from .errors import ConfigError, DimensionError
from .grid import TimeGrid
from .problem import OcpProblem


def _rk4_step(problem, x, u, h):
    """Batched RK4 state map; ``h`` broadcasts over the batch."""
    h = np.asarray(h, dtype=float)[:, None]
    k1 = problem.dyn(x, u)
    k2 = problem.dyn(x + 0.5 * h * k1, u)
    k3 = problem.dyn(x + 0.5 * h * k2, u)
    k4 = problem.dyn(x + h * k3, u)
    return x + (h / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)


def _rk4_step_jacobians(problem, x, u, h):
    """Batched RK4 map with its Jacobians w.r.t. x and u."""
    m, nx = x.shape
    hb = np.asarray(h, dtype=float)[:, None]
    hj = np.asarray(h, dtype=float)[:, None, None]
    eye = np.broadcast_to(np.eye(nx), (m, nx, nx))

    k1 = problem.dyn(x, u)
    x2 = x + 0.5 * hb * k1
    k2 = problem.dyn(x2, u)
    x3 = x + 0.5 * hb * k2
    k3 = problem.dyn(x3, u)
    x4 = x + hb * k3
    k4 = problem.dyn(x4, u)

    D1 = problem.f_x(x, u)
    E1 = problem.f_u(x, u)
    F2x, F2u = problem.f_x(x2, u), problem.f_u(x2, u)
    D2 = F2x @ (eye + 0.5 * hj * D1)
    E2 = F2u + F2x @ (0.5 * hj * E1)
    F3x, F3u = problem.f_x(x3, u), problem.f_u(x3, u)
    D3 = F3x @ (eye + 0.5 * hj * D2)
    E3 = F3u + F3x @ (0.5 * hj * E2)
    F4x, F4u = problem.f_x(x4, u), problem.f_u(x4, u)
    D4 = F4x @ (eye + hj * D3)
    E4 = F4u + F4x @ (hj * E3)

    phi = x + (hb / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)
    A = eye + (hj / 6.0) * (D1 + 2.0 * D2 + 2.0 * D3 + D4)
    B = (hj / 6.0) * (E1 + 2.0 * E2 + 2.0 * E3 + E4)
    return phi, A, B


class DiscreteNlp:
    """A transcribed OCP: layout, constraint bookkeeping, and evaluators."""

    def __init__(self, problem: OcpProblem, grid: TimeGrid):
        if abs(grid.horizon - float(problem.horizon)) > 1e-12 * max(1.0, problem.horizon):
            raise ConfigError(
                f"grid ends at {grid.horizon}, problem horizon is {problem.horizon}"
            )
        if problem.time_mode == "continuous" and grid.n_intervals < 2:
            raise ConfigError("continuous transcription needs at least 2 intervals")
        if problem.time_mode == "discrete":
            if not np.allclose(grid.nodes, np.arange(len(grid))):
                raise ConfigError("discrete problems require the integer grid 0..T")

        self.problem = problem
        self.grid = grid
        self.nx = problem.state_dim
        self.nu = problem.input_dim
        self.N = grid.n_intervals
        self.quadrature_rule = "trapezoid" if problem.time_mode == "continuous" else "sum"
        self.steps = grid.steps

        self.n_states = (self.N + 1) * self.nx
        self.n_vars = self.n_states + self.N * self.nu

        self.n_psi = problem.n_psi
        self.psi_eq_idx = np.asarray(problem.terminal_equalities, dtype=int)
        self.psi_ineq_idx = np.asarray(
            [j for j in range(self.n_psi) if j not in problem.terminal_equalities],
            dtype=int,
        )
        self.n_defects = self.N * self.nx
        self.n_eq = self.nx + self.n_defects + self.psi_eq_idx.size
        self.n_path = problem.n_ineq
        self.n_term_rows = self.psi_ineq_idx.size + problem.n_terminal_box
        self.n_ineq = self.N * self.n_path + self.n_term_rows

        self.eq_labels = (
            [("init", i) for i in range(self.nx)]
            + [("defect", k, i) for k in range(self.N) for i in range(self.nx)]
            + [("psi_eq", int(j)) for j in self.psi_eq_idx]
        )
        self.ineq_labels = (
            [("path", k) + lab for k in range(self.N) for lab in problem.ineq_labels]
            + [("psi", int(j)) for j in self.psi_ineq_idx]
            + [("terminal_box", i) for i in range(problem.n_terminal_box)]
        )

    # -- packing -------------------------------------------------------------

    def pack(self, states, inputs) -> np.ndarray:
        states = np.asarray(states, dtype=float).reshape(self.N + 1, self.nx)
        inputs = np.asarray(inputs, dtype=float).reshape(self.N, self.nu)
        return np.concatenate([states.ravel(), inputs.ravel()])

    def unpack(self, z):
        states = z[: self.n_states].reshape(self.N + 1, self.nx)
        inputs = z[self.n_states:].reshape(self.N, self.nu)
        return states, inputs

    # -- simulation ------------------------------------------------------------

    def step_map(self, x, u, h):
        """One-interval state map (RK4 in continuous mode, f itself in discrete)."""
        if self.problem.time_mode == "discrete":
            return self.problem.dyn(x, u)
        return _rk4_step(self.problem, x, u, np.atleast_1d(h))

    def rollout(self, x0, inputs) -> np.ndarray:
        """Forward-simulate the transcription's own integrator."""
        inputs = np.asarray(inputs, dtype=float).reshape(self.N, self.nu)
        states = np.empty((self.N + 1, self.nx))
        states[0] = np.asarray(x0, dtype=float).reshape(self.nx)
        for k in range(self.N):
            states[k + 1] = self.step_map(
                states[k][None, :], inputs[k][None, :], self.steps[k : k + 1]
            )[0]
        return states

    # -- objective ---------------------------------------------------------------

    def running_cost(self, states, inputs) -> float:
        """Quadrature of the stage cost along the trajectory (no Mayer term)."""
        states = np.asarray(states, dtype=float).reshape(self.N + 1, self.nx)
        inputs = np.asarray(inputs, dtype=float).reshape(self.N, self.nu)
        if self.quadrature_rule == "sum":
            return float(np.sum(self.problem.cost(states[:-1], inputs)))
        l_left = self.problem.cost(states[:-1], inputs)
        l_right = self.problem.cost(states[1:], inputs)
        return float(np.sum(0.5 * self.steps * (l_left + l_right)))

    def objective(self, z) -> float:
        states, inputs = self.unpack(np.asarray(z, dtype=float))
        return self.running_cost(states, inputs) + float(self.problem.mayer(states[-1])[0])

    def objective_gradient(self, z) -> np.ndarray:
        states, inputs = self.unpack(np.asarray(z, dtype=float))
        gx = np.zeros((self.N + 1, self.nx))
        gu = np.zeros((self.N, self.nu))
        if self.quadrature_rule == "sum":
            gx[:-1] = self.problem.l_x(states[:-1], inputs)
            gu[:] = self.problem.l_u(states[:-1], inputs)
        else:
            w = 0.5 * self.steps[:, None]
            gx[:-1] += w * self.problem.l_x(states[:-1], inputs)
            gx[1:] += w * self.problem.l_x(states[1:], inputs)
            gu[:] = w * (
                self.problem.l_u(states[:-1], inputs)
                + self.problem.l_u(states[1:], inputs)
            )
        gx[-1] += self.problem.phi_x(states[-1])[0]
        return np.concatenate([gx.ravel(), gu.ravel()])

    # -- constraints ---------------------------------------------------------------

    def defects(self, z) -> np.ndarray:
        """Dynamics defects ``Phi(x_k, u_k) - x_{k+1}`` stacked over intervals."""
        states, inputs = self.unpack(np.asarray(z, dtype=float))
        phi = self.step_map(states[:-1], inputs, self.steps)
        return (phi - states[1:]).ravel()

    def eq_values(self, z) -> np.ndarray:
        states, _ = self.unpack(np.asarray(z, dtype=float))
        parts = [states[0] - self.problem.initial_state, self.defects(z)]
        if self.psi_eq_idx.size:
            parts.append(self.problem.psi(states[-1])[0][self.psi_eq_idx])
        return np.concatenate(parts)

    def ineq_values(self, z) -> np.ndarray:
        states, inputs = self.unpack(np.asarray(z, dtype=float))
        parts = []
        if self.n_path:
            parts.append(self.problem.ineq(states[:-1], inputs).ravel())
        if self.psi_ineq_idx.size:
            parts.append(self.problem.psi(states[-1])[0][self.psi_ineq_idx])
        if self.problem.n_terminal_box:
            parts.append(self.problem.terminal_box(states[-1])[0])
        if not parts:
            return np.zeros(0)
        return np.concatenate(parts)

    def linearize(self, z) -> dict:
        """All first-order data the solver needs at ``z``, in block form."""
        states, inputs = self.unpack(np.asarray(z, dtype=float))
        if self.problem.time_mode == "discrete":
            phi = self.problem.dyn(states[:-1], inputs)
            A = self.problem.f_x(states[:-1], inputs)
            B = self.problem.f_u(states[:-1], inputs)
        else:
            phi, A, B = _rk4_step_jacobians(self.problem, states[:-1], inputs, self.steps)
        data = {
            "states": states,
            "inputs": inputs,
            "phi": phi,
            "A": A,
            "B": B,
            "defects": (phi - states[1:]).ravel(),
            "init_residual": states[0] - self.problem.initial_state,
            "grad": self.objective_gradient(z),
            "objective": self.running_cost(states, inputs)
            + float(self.problem.mayer(states[-1])[0]),
        }
        if self.n_path:
            data["G"] = self.problem.ineq(states[:-1], inputs)
            Gx, Gu = self.problem.ineq_jacobians(states[:-1], inputs)
            data["Gx"], data["Gu"] = Gx, Gu
        if self.n_psi:
            data["psi"] = self.problem.psi(states[-1])[0]
            data["psi_x"] = self.problem.psi_x(states[-1])[0]
        if self.problem.n_terminal_box:
            data["term_box"] = self.problem.terminal_box(states[-1])[0]
            data["term_box_x"] = self.problem.terminal_box_jacobian(states[-1])[0]
        return data

    # -- dense Jacobians (test and small-scale use) ------------------------------

    def eq_jacobian(self, z) -> np.ndarray:
        lin = self.linearize(np.asarray(z, dtype=float))
        J = np.zeros((self.n_eq, self.n_vars))
        nx, nu, N = self.nx, self.nu, self.N
        J[:nx, :nx] = np.eye(nx)
        for k in range(N):
            r = nx + k * nx
            J[r : r + nx, k * nx : (k + 1) * nx] = lin["A"][k]
            J[r : r + nx, (k + 1) * nx : (k + 2) * nx] = -np.eye(nx)
            J[r : r + nx, self.n_states + k * nu : self.n_states + (k + 1) * nu] = lin["B"][k]
        if self.psi_eq_idx.size:
            r = nx + N * nx
            J[r:, N * nx : (N + 1) * nx] = lin["psi_x"][self.psi_eq_idx]
        return J

    def ineq_jacobian(self, z) -> np.ndarray:
        lin = self.linearize(np.asarray(z, dtype=float))
        J = np.zeros((self.n_ineq, self.n_vars))
        nx, nu, N, nG = self.nx, self.nu, self.N, self.n_path
        for k in range(N):
            r = k * nG
            if nG:
                J[r : r + nG, k * nx : (k + 1) * nx] = lin["Gx"][k]
                J[r : r + nG, self.n_states + k * nu : self.n_states + (k + 1) * nu] = lin["Gu"][k]
        row = N * nG
        if self.psi_ineq_idx.size:
            J[row : row + self.psi_ineq_idx.size, N * nx : (N + 1) * nx] = lin["psi_x"][
                self.psi_ineq_idx
            ]
            row += self.psi_ineq_idx.size
        if self.problem.n_terminal_box:
            J[row:, N * nx : (N + 1) * nx] = lin["term_box_x"]
        return J


def transcribe(problem: OcpProblem, grid: TimeGrid) -> DiscreteNlp:
    """Build the finite program for ``problem`` on ``grid``."""
    return DiscreteNlp(problem, grid)


def default_grid(problem: OcpProblem, n_intervals: int | None = None) -> TimeGrid:
    """Integer grid for discrete problems, uniform grid otherwise."""
    if problem.time_mode == "discrete":
        return TimeGrid.integers(problem.horizon)
    if n_intervals is None:
        n_intervals = max(2, int(round(200 * problem.horizon)))
    return TimeGrid.uniform(problem.horizon, n_intervals)
