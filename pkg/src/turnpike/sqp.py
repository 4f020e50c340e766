"""Condensed SQP solver for transcribed optimal control problems.

The search direction is computed in the reduced space of input moves: the
linearized dynamics (and the initial condition) are eliminated by forward
sensitivity propagation, the Lagrangian curvature model is projected onto
that null space, and the resulting inequality-constrained QP is solved by
the dense active-set routine in :mod:`turnpike.qp` with a warm-started
active set.  Dynamics multipliers are recovered by the backward adjoint
recursion, so reported costates satisfy the discrete adjoint equations by
construction while input stationarity converges with the KKT residual.

Curvature models:

* ``"exact"`` (default) - the block-sparse Lagrangian Hessian assembled per
  interval (finite differences through the stage-map Jacobians), made
  convex by an eigenvalue floor on the *reduced* Hessian plus an adaptive
  proximal term.  Bang-singular problems need the exact model: their
  reduced curvature along singular directions is tiny but positive, and any
  quasi-Newton estimate of it stalls the KKT residual.
* ``"bfgs"`` - damped BFGS in the full variable space.

Globalization is an l1 exact-penalty line search with Powell's feasibility
relaxation on the QP when the linearized constraints are inconsistent.
"""

from __future__ import annotations

import time
from dataclasses import dataclass
from typing import Optional

import numpy as np

from .errors import ConvergenceError, InfeasibilityError
from .grid import TimeGrid
from .problem import OcpProblem
from .qp import solve_qp
from .solution import Solution
from .transcribe import DiscreteNlp, _rk4_step_jacobians, default_grid, transcribe

_FD_STEP = float(np.cbrt(np.finfo(float).eps))


@dataclass
class SqpOptions:
    tolerance: float = 1e-8
    max_iterations: int = 500
    hessian: str = "exact"  # "exact" | "bfgs"
    merit_c1: float = 1e-4
    step_min: float = 1e-12
    relax_min: float = 1e-4
    eig_floor: float = 1e-9
    rho_init: float = 1e-3
    rho_min: float = 1e-10
    verbose: bool = False


def _resample_solution(sol: Solution, grid: TimeGrid):
    """Zero-order-hold inputs / linearly interpolated states onto ``grid``."""
    told = sol.grid.nodes
    tnew = grid.nodes
    nx = sol.states.shape[1]
    X = np.column_stack(
        [np.interp(tnew, told, sol.states[:, i]) for i in range(nx)]
    )
    idx = np.clip(np.searchsorted(told, tnew[:-1], side="right") - 1, 0, len(told) - 2)
    U = sol.inputs[np.minimum(idx, sol.inputs.shape[0] - 1)]
    return X, U


def _fd_hess_of_gradpair(gx_fn, gu_fn, X, U):
    """Symmetric FD Hessian blocks of a scalar with gradients (gx, gu)."""
    m, nx = X.shape
    nu = U.shape[1]
    nb = nx + nu
    H = np.empty((m, nb, nb))
    for j in range(nx):
        h = _FD_STEP * np.maximum(1.0, np.abs(X[:, j]))
        Xh, Xl = X.copy(), X.copy()
        Xh[:, j] += h
        Xl[:, j] -= h
        H[:, :nx, j] = (gx_fn(Xh, U) - gx_fn(Xl, U)) / (2 * h)[:, None]
        H[:, nx:, j] = (gu_fn(Xh, U) - gu_fn(Xl, U)) / (2 * h)[:, None]
    for j in range(nu):
        h = _FD_STEP * np.maximum(1.0, np.abs(U[:, j]))
        Uh, Ul = U.copy(), U.copy()
        Uh[:, j] += h
        Ul[:, j] -= h
        H[:, :nx, nx + j] = (gx_fn(X, Uh) - gx_fn(X, Ul)) / (2 * h)[:, None]
        H[:, nx:, nx + j] = (gu_fn(X, Uh) - gu_fn(X, Ul)) / (2 * h)[:, None]
    return 0.5 * (H + np.transpose(H, (0, 2, 1)))


def _fd_contracted_map_hessian(jac_fn, X, U, weights):
    """FD Hessian of ``w . F(x, u)`` for a vector map with Jacobian pair fn.

    ``jac_fn(X, U) -> (m, p, nx), (m, p, nu)``; ``weights`` has shape (m, p).
    """
    m, nx = X.shape
    nu = U.shape[1]
    nb = nx + nu
    H = np.empty((m, nb, nb))

    def contracted_grad(Xp, Up):
        Jx, Ju = jac_fn(Xp, Up)
        return np.concatenate(
            [np.einsum("mp,mpj->mj", weights, Jx), np.einsum("mp,mpj->mj", weights, Ju)],
            axis=1,
        )

    for j in range(nx):
        h = _FD_STEP * np.maximum(1.0, np.abs(X[:, j]))
        Xh, Xl = X.copy(), X.copy()
        Xh[:, j] += h
        Xl[:, j] -= h
        H[:, :, j] = (contracted_grad(Xh, U) - contracted_grad(Xl, U)) / (2 * h)[:, None]
    for j in range(nu):
        h = _FD_STEP * np.maximum(1.0, np.abs(U[:, j]))
        Uh, Ul = U.copy(), U.copy()
        Uh[:, j] += h
        Ul[:, j] -= h
        H[:, :, nx + j] = (contracted_grad(X, Uh) - contracted_grad(X, Ul)) / (2 * h)[:, None]
    return 0.5 * (H + np.transpose(H, (0, 2, 1)))


class _CondensedSqp:
    def __init__(self, nlp: DiscreteNlp, opts: SqpOptions):
        self.nlp = nlp
        self.opts = opts
        self.N = nlp.N
        self.nx = nlp.nx
        self.nu = nlp.nu
        self.n = nlp.n_vars
        self.m_red = self.N * self.nu
        self.sigma = 1.0
        self.rho = opts.rho_init
        self.warm_active: Optional[np.ndarray] = None

    # -- sensitivity condensing ------------------------------------------------

    def _sensitivities(self, lin):
        N, nx, nu, m = self.N, self.nx, self.nu, self.m_red
        Zx = np.zeros((N + 1, nx, m))
        p1 = np.zeros((N + 1, nx))
        p1[0] = -lin["init_residual"]
        defects = lin["defects"].reshape(N, nx)
        A, B = lin["A"], lin["B"]
        for k in range(N):
            Zx[k + 1] = A[k] @ Zx[k]
            Zx[k + 1][:, k * nu : (k + 1) * nu] += B[k]
            p1[k + 1] = A[k] @ p1[k] + defects[k]
        W = np.zeros((self.n, m))
        W[: self.nlp.n_states] = Zx.reshape(-1, m)
        W[self.nlp.n_states :] = np.eye(m)
        return Zx, p1, W

    def _build_qp_data(self, lin, Zx, p1):
        nlp = self.nlp
        N, nu, m = self.N, self.nu, self.m_red
        M_rows, cI, Jp = [], [], []
        if nlp.n_path:
            Gx, Gu = lin["Gx"], lin["Gu"]
            Mpath = np.einsum("kij,kjm->kim", Gx, Zx[:N])
            for k in range(N):
                Mpath[k][:, k * nu : (k + 1) * nu] += Gu[k]
            M_rows.append(Mpath.reshape(-1, m))
            cI.append(lin["G"].ravel())
            Jp.append(np.einsum("kij,kj->ki", Gx, p1[:N]).ravel())
        if nlp.psi_ineq_idx.size:
            Pj = lin["psi_x"][nlp.psi_ineq_idx]
            M_rows.append(Pj @ Zx[N])
            cI.append(lin["psi"][nlp.psi_ineq_idx])
            Jp.append(Pj @ p1[N])
        if nlp.problem.n_terminal_box:
            Bj = lin["term_box_x"]
            M_rows.append(Bj @ Zx[N])
            cI.append(lin["term_box"])
            Jp.append(Bj @ p1[N])
        M = np.vstack(M_rows) if M_rows else np.zeros((0, m))
        cI = np.concatenate(cI) if cI else np.zeros(0)
        Jp = np.concatenate(Jp) if Jp else np.zeros(0)

        if nlp.psi_eq_idx.size:
            Pe = lin["psi_x"][nlp.psi_eq_idx]
            C = Pe @ Zx[N]
            c_eq = lin["psi"][nlp.psi_eq_idx]
            Cp = Pe @ p1[N]
        else:
            C = np.zeros((0, m))
            c_eq = np.zeros(0)
            Cp = np.zeros(0)
        return M, cI, Jp, C, c_eq, Cp

    # -- curvature models ----------------------------------------------------------

    def _exact_hessian(self, lin, nu_vec, mu, lam_psi_eq):
        """Block-sparse Lagrangian Hessian scattered into the full space."""
        nlp = self.nlp
        problem = nlp.problem
        N, nx, nu = self.N, self.nx, self.nu
        X, U, Xn = lin["states"][:-1], lin["inputs"], lin["states"][1:]
        H = np.zeros((self.n, self.n))
        ns = nlp.n_states
        continuous = problem.time_mode == "continuous"
        w = 0.5 * nlp.steps if continuous else np.ones(N)

        Hl = _fd_hess_of_gradpair(problem.l_x, problem.l_u, X, U) * w[:, None, None]
        if continuous:
            Hr = _fd_hess_of_gradpair(problem.l_x, problem.l_u, Xn, U) * w[:, None, None]

        if continuous:
            def phi_jac(Xp, Up):
                _, A, B = _rk4_step_jacobians(problem, Xp, Up, nlp.steps)
                return A, B
        else:
            def phi_jac(Xp, Up):
                return problem.f_x(Xp, Up), problem.f_u(Xp, Up)

        Hd = _fd_contracted_map_hessian(phi_jac, X, U, nu_vec)
        Hl += Hd

        if problem.n_g and mu is not None:
            mu_path = mu[: N * nlp.n_path].reshape(N, nlp.n_path)[:, : problem.n_g]
            if np.any(mu_path != 0.0):
                def g_jac(Xp, Up):
                    Jx, Ju = problem.ineq_jacobians(Xp, Up)
                    return Jx[:, : problem.n_g], Ju[:, : problem.n_g]

                Hl += _fd_contracted_map_hessian(g_jac, X, U, mu_path)

        for k in range(N):
            ix = slice(k * nx, (k + 1) * nx)
            iu = slice(ns + k * nu, ns + (k + 1) * nu)
            H[ix, ix] += Hl[k, :nx, :nx]
            H[ix, iu] += Hl[k, :nx, nx:]
            H[iu, ix] += Hl[k, nx:, :nx]
            H[iu, iu] += Hl[k, nx:, nx:]
            if continuous:
                ix1 = slice((k + 1) * nx, (k + 2) * nx)
                H[ix1, ix1] += Hr[k, :nx, :nx]
                H[ix1, iu] += Hr[k, :nx, nx:]
                H[iu, ix1] += Hr[k, nx:, :nx]
                H[iu, iu] += Hr[k, nx:, nx:]

        # terminal curvature: Mayer plus terminal-constraint contraction
        xN = lin["states"][-1][None, :]
        phixx = np.empty((nx, nx))
        for j in range(nx):
            h = _FD_STEP * max(1.0, abs(xN[0, j]))
            xh, xl = xN.copy(), xN.copy()
            xh[0, j] += h
            xl[0, j] -= h
            phixx[:, j] = (problem.phi_x(xh)[0] - problem.phi_x(xl)[0]) / (2 * h)
        Ht = 0.5 * (phixx + phixx.T)
        if nlp.n_psi:
            duals = np.zeros(nlp.n_psi)
            row = N * nlp.n_path
            for pos, j in enumerate(nlp.psi_ineq_idx):
                duals[j] = mu[row + pos] if mu is not None else 0.0
            for pos, j in enumerate(nlp.psi_eq_idx):
                duals[j] = lam_psi_eq[pos] if lam_psi_eq is not None and lam_psi_eq.size else 0.0
            if np.any(duals != 0.0):
                psixx = np.empty((nx, nx))
                for j in range(nx):
                    h = _FD_STEP * max(1.0, abs(xN[0, j]))
                    xh, xl = xN.copy(), xN.copy()
                    xh[0, j] += h
                    xl[0, j] -= h
                    psixx[:, j] = (
                        duals @ (problem.psi_x(xh)[0] - problem.psi_x(xl)[0])
                    ) / (2 * h)
                Ht += 0.5 * (psixx + psixx.T)
        iN = slice(N * nx, (N + 1) * nx)
        H[iN, iN] += Ht
        return H

    def _convexify_reduced(self, Hr):
        Hr = 0.5 * (Hr + Hr.T)
        lam, V = np.linalg.eigh(Hr)
        floor = self.opts.eig_floor * max(1.0, float(lam[-1]) if lam.size else 1.0)
        lam_fixed = np.maximum(lam, floor)
        Hfixed = (V * lam_fixed) @ V.T
        return Hfixed + self.rho * np.eye(Hr.shape[0])

    # -- dual recovery -----------------------------------------------------------

    def _recover_duals(self, lin, mu, lam_psi_eq):
        """Backward adjoint recursion at the current point (zero step).

        Returns (eta, nu, u-stationarity residual): eta is the initial-state
        multiplier, nu the defect multipliers; the x-rows of the KKT system
        vanish identically by this construction.
        """
        nlp = self.nlp
        N, nx = self.N, self.nx
        core = lin["grad"]
        rx = core[: nlp.n_states].reshape(N + 1, nx).copy()
        ru = core[nlp.n_states :].reshape(N, self.nu).copy()
        if nlp.n_path:
            mu_path = mu[: N * nlp.n_path].reshape(N, nlp.n_path)
            rx[:N] += np.einsum("kij,ki->kj", lin["Gx"], mu_path)
            ru += np.einsum("kij,ki->kj", lin["Gu"], mu_path)
        row = N * nlp.n_path
        if nlp.psi_ineq_idx.size:
            rx[N] += lin["psi_x"][nlp.psi_ineq_idx].T @ mu[row : row + nlp.psi_ineq_idx.size]
            row += nlp.psi_ineq_idx.size
        if nlp.problem.n_terminal_box:
            rx[N] += lin["term_box_x"].T @ mu[row:]
        if nlp.psi_eq_idx.size and lam_psi_eq is not None and lam_psi_eq.size:
            rx[N] += lin["psi_x"][nlp.psi_eq_idx].T @ lam_psi_eq

        nu_vec = np.zeros((N, nx))
        nu_vec[N - 1] = rx[N]
        A = lin["A"]
        for k in range(N - 1, 0, -1):
            nu_vec[k - 1] = rx[k] + A[k].T @ nu_vec[k]
        eta = -(rx[0] + A[0].T @ nu_vec[0])
        stat_u = ru + np.einsum("kij,ki->kj", lin["B"], nu_vec)
        return eta, nu_vec, float(np.max(np.abs(stat_u))) if stat_u.size else 0.0

    def _lagrangian_gradient(self, lin, duals):
        eta, nu_vec, mu, lam_psi_eq = duals
        nlp = self.nlp
        N, nx = self.N, self.nx
        gx = lin["grad"][: nlp.n_states].reshape(N + 1, nx).copy()
        gu = lin["grad"][nlp.n_states :].reshape(N, self.nu).copy()
        gx[0] += eta
        gx[:N] += np.einsum("kij,ki->kj", lin["A"], nu_vec)
        gx[1:] -= nu_vec
        gu += np.einsum("kij,ki->kj", lin["B"], nu_vec)
        if nlp.n_path:
            mu_path = mu[: N * nlp.n_path].reshape(N, nlp.n_path)
            gx[:N] += np.einsum("kij,ki->kj", lin["Gx"], mu_path)
            gu += np.einsum("kij,ki->kj", lin["Gu"], mu_path)
        row = N * nlp.n_path
        if nlp.psi_ineq_idx.size:
            gx[N] += lin["psi_x"][nlp.psi_ineq_idx].T @ mu[row : row + nlp.psi_ineq_idx.size]
            row += nlp.psi_ineq_idx.size
        if nlp.problem.n_terminal_box:
            gx[N] += lin["term_box_x"].T @ mu[row:]
        if nlp.psi_eq_idx.size and lam_psi_eq.size:
            gx[N] += lin["psi_x"][nlp.psi_eq_idx].T @ lam_psi_eq
        return np.concatenate([gx.reshape(-1), gu.reshape(-1)])

    def _bfgs_update(self, s, y):
        if float(np.max(np.abs(s))) < 1e-14:
            return
        Bs = self.B @ s
        sBs = float(s @ Bs)
        sy = float(s @ y)
        if sBs <= 0:
            return
        if sy < 0.2 * sBs:
            theta = 0.8 * sBs / (sBs - sy)
            r = theta * y + (1.0 - theta) * Bs
        else:
            r = y
        sr = float(s @ r)
        if sr <= 1e-14 * max(1.0, float(np.linalg.norm(s)) * float(np.linalg.norm(r))):
            return
        self.B -= np.outer(Bs, Bs) / sBs
        self.B += np.outer(r, r) / sr

    # -- merit -----------------------------------------------------------------
    #
    # Iterates live on the rollout manifold (states are regenerated from the
    # inputs by the transcription's own integrator), so dynamics defects and
    # the initial-condition residual are zero by construction and never enter
    # the merit function.  This removes the Maratos-type step rejections that
    # the defect terms of an l1 penalty otherwise cause near singular arcs.

    def _merit_of_inputs(self, U):
        with np.errstate(over="ignore", invalid="ignore"):
            X = self.nlp.rollout(self.nlp.problem.initial_state, U)
            if not np.all(np.isfinite(X)):
                return np.inf, np.inf, np.inf, X
            z = self.nlp.pack(X, U)
            f = self.nlp.objective(z)
            cin = self.nlp.ineq_values(z)
        if not np.isfinite(f):
            return np.inf, np.inf, np.inf, X
        infeas = float(np.sum(np.maximum(cin, 0.0)))
        if self.nlp.psi_eq_idx.size:
            psi = self.nlp.problem.psi(X[-1])[0][self.nlp.psi_eq_idx]
            infeas += float(np.sum(np.abs(psi)))
        return f + self.sigma * infeas, f, infeas, X

    def _feasibility(self, cI, c_eq):
        worst = 0.0
        if c_eq.size:
            worst = max(worst, float(np.max(np.abs(c_eq))))
        if cI.size:
            worst = max(worst, float(np.max(np.maximum(cI, 0.0))))
        return worst

    # -- main loop ----------------------------------------------------------------

    def run(self, U0, warm_active=None):
        opts = self.opts
        nlp = self.nlp
        use_bfgs = opts.hessian == "bfgs"
        U = np.asarray(U0, dtype=float).reshape(self.N, self.nu).copy()
        X = nlp.rollout(nlp.problem.initial_state, U)
        if not np.all(np.isfinite(X)):
            raise ConvergenceError("initial rollout diverged; supply a better guess")
        z = nlp.pack(X, U)
        if use_bfgs:
            self.B = np.eye(self.n)
        self.warm_active = warm_active
        scaled = False
        prev = None
        best = None
        mu_prev = np.zeros(nlp.n_ineq)
        lam_eq_prev = np.zeros(nlp.psi_eq_idx.size)
        nu_prev = np.zeros((self.N, self.nx))
        feas_hist = []
        zeta_hist = []
        status = "max_iterations"
        it = 0

        for it in range(opts.max_iterations):
            lin = nlp.linearize(z)

            if use_bfgs and prev is not None:
                lin_old, duals_old, s_vec = prev
                y_vec = self._lagrangian_gradient(lin, duals_old) - self._lagrangian_gradient(
                    lin_old, duals_old
                )
                if not scaled:
                    sy = float(s_vec @ y_vec)
                    yy = float(y_vec @ y_vec)
                    if sy > 1e-12 and yy > 0:
                        self.B *= yy / sy
                    scaled = True
                self._bfgs_update(s_vec, y_vec)
                prev = None

            Zx, p1, W = self._sensitivities(lin)
            M, cI, Jp, C, c_eq, Cp = self._build_qp_data(lin, Zx, p1)
            feas = self._feasibility(cI, c_eq)
            feas_hist.append(feas)

            if use_bfgs:
                Hfull = self.B
            else:
                Hfull = self._exact_hessian(lin, nu_prev, mu_prev, lam_eq_prev)
            HW = Hfull @ W
            Hr_raw = W.T @ HW
            Hr = self._convexify_reduced(Hr_raw) if not use_bfgs else (
                0.5 * (Hr_raw + Hr_raw.T) + 1e-10 * np.eye(self.m_red)
            )
            g_full = lin["grad"]
            gr_base = W.T @ g_full

            # QP with feasibility relaxation (rollout manifold: p1 ~ 0)
            zeta = 1.0
            res = None
            keep = (np.abs(M).max(axis=1) >= 1e-14) if M.size else np.zeros(0, dtype=bool)
            while True:
                rhs_eq = -zeta * (c_eq + Cp)
                target = -cI + (1.0 - zeta) * np.maximum(cI, 0.0)
                rhs_in = target - zeta * Jp
                try:
                    res = solve_qp(
                        Hr,
                        gr_base,
                        C if C.shape[0] else None,
                        rhs_eq if C.shape[0] else None,
                        M[keep] if M.size else None,
                        rhs_in[keep] if M.size else None,
                        warm_active=self.warm_active[keep]
                        if (self.warm_active is not None and self.warm_active.size == keep.size)
                        else None,
                    )
                    break
                except ConvergenceError as exc:
                    if not getattr(exc, "infeasible", False):
                        raise
                    zeta *= 0.5
                    if zeta < opts.relax_min:
                        res = None
                        break
            zeta_hist.append(zeta if res is not None else 0.0)
            if res is None:
                if feas <= opts.tolerance:
                    status = "stalled"
                    break
                self._raise_infeasible(cI, c_eq)

            mu = np.zeros(cI.size)
            if res.ineq_multipliers.size:
                mu[keep] = res.ineq_multipliers
            act = np.zeros(cI.size, dtype=bool)
            if res.active.size:
                act[keep] = res.active
            self.warm_active = act
            lam_psi_eq = res.eq_multipliers
            du = res.w
            d_x = np.einsum("kim,m->ki", Zx, du)
            d_full = np.concatenate([d_x.reshape(-1), du])

            eta0, nu0, stat_u0 = self._recover_duals(lin, mu, lam_psi_eq)
            mu_prev, lam_eq_prev, nu_prev = mu, lam_psi_eq, nu0
            comp = float(np.max(np.abs(mu * cI))) if cI.size else 0.0
            g_scale = 1.0 + float(np.max(np.abs(g_full)))
            kkt = {
                "stationarity": stat_u0,
                "feasibility": feas,
                "complementarity": comp,
                "step": float(np.max(np.abs(d_full))),
            }
            score = (feas > 10 * opts.tolerance, max(stat_u0, feas))
            if best is None or score < best[0]:
                best = (score, z.copy(), kkt, lin, (eta0, nu0, mu, lam_psi_eq))
            if (
                feas <= opts.tolerance
                and stat_u0 <= opts.tolerance * g_scale
                and comp <= opts.tolerance * g_scale
            ):
                status = "optimal"
                best = (score, z.copy(), kkt, lin, (eta0, nu0, mu, lam_psi_eq))
                break

            if opts.verbose:
                print(
                    f"[sqp] it={it:3d} f={lin['objective']:+.6e} feas={feas:.2e} "
                    f"stat={stat_u0:.2e} step={kkt['step']:.2e} rho={self.rho:.1e} zeta={zeta:.2f}"
                )

            # l1 merit line search along the rollout manifold
            mult_inf = max(
                float(np.max(np.abs(nu0))) if nu0.size else 0.0,
                float(np.max(np.abs(mu))) if mu.size else 0.0,
                float(np.max(np.abs(lam_psi_eq))) if lam_psi_eq.size else 0.0,
                float(np.max(np.abs(eta0))),
            )
            self.sigma = max(self.sigma, 1.2 * mult_inf + 1e-6)
            phi0, f0, infeas0, _ = self._merit_of_inputs(U)
            Dphi = min(float(g_full @ d_full) - self.sigma * zeta * infeas0, -1e-16)
            # Below this, merit differences are rounding noise and Armijo is
            # meaningless.  A full step is then taken only when it is small
            # (a polish step); large merit-neutral steps would random-walk
            # through the flat singular-arc subspace into chattering wells.
            noise = 50.0 * np.finfo(float).eps * (1.0 + abs(phi0)) * max(1.0, self.N / 10.0)
            step_inf = float(np.max(np.abs(d_full)))
            u_scale = 1.0 + float(np.max(np.abs(U)))
            small_step = step_inf <= 1e-4 * u_scale
            alpha = 1.0
            accepted = False
            noise_regime = -Dphi <= noise
            if noise_regime and small_step:
                U_try = U + du.reshape(self.N, self.nu)
                phi_try, _, _, X_try = self._merit_of_inputs(U_try)
                if np.isfinite(phi_try) and phi_try <= phi0 + noise:
                    accepted = True
            if not accepted and not noise_regime:
                alpha = 1.0
                while alpha >= opts.step_min:
                    U_try = U + alpha * du.reshape(self.N, self.nu)
                    phi_try, _, _, X_try = self._merit_of_inputs(U_try)
                    if phi_try <= phi0 + opts.merit_c1 * alpha * Dphi + noise:
                        accepted = True
                        break
                    alpha *= 0.5

            if not use_bfgs:
                if accepted and alpha == 1.0 and not noise_regime:
                    self.rho = max(self.rho * 0.2, opts.rho_min)
                elif not accepted or alpha <= 0.25:
                    self.rho = min(max(self.rho, 1e-8) * 8.0, 1e2)

            if not accepted:
                basically_converged = (
                    feas <= opts.tolerance
                    and comp <= 1e2 * opts.tolerance * g_scale
                    and (stat_u0 <= 100 * opts.tolerance * g_scale or
                         (noise_regime and step_inf <= 1e-2 * u_scale))
                )
                if basically_converged and self.rho >= 1e-4:
                    status = "stalled"
                    break
                if use_bfgs and scaled:
                    self.B = np.eye(self.n)
                    scaled = False
                    continue
                if not use_bfgs and self.rho < 1e2:
                    continue
                if feas <= opts.tolerance and stat_u0 <= 1e-4 * g_scale:
                    status = "stalled"
                else:
                    status = "linesearch_failure"
                break

            if use_bfgs:
                s_vec = nlp.pack(X_try, U_try) - z
                prev = (lin, (eta0, nu0, mu, lam_psi_eq), s_vec)
            U = U_try
            X = X_try
            z = nlp.pack(X, U)

            if self._infeasible_stall(feas_hist, zeta_hist):
                self._raise_infeasible(cI, c_eq)

        if best is None:
            raise ConvergenceError("sqp made no progress", iterations=it + 1)
        _, z_best, kkt, lin, duals0 = best
        return z_best, kkt, lin, duals0, status, it + 1

    # -- failure handling ------------------------------------------------------------

    def _infeasible_stall(self, feas_hist, zeta_hist):
        w = 25
        if len(feas_hist) < 2 * w:
            return False
        recent = min(feas_hist[-w:])
        older = min(feas_hist[:-w])
        relaxing = any(zt < 1.0 for zt in zeta_hist[-w:])
        return (
            recent > max(1e-6, 100 * self.opts.tolerance)
            and recent > 0.95 * older
            and relaxing
        )

    def _raise_infeasible(self, cI, c_eq):
        labels = self.nlp.ineq_labels
        rows = [
            (str(labels[i]), float(cI[i]))
            for i in np.argsort(-cI)[:10]
            if cI[i] > self.opts.tolerance
        ]
        if c_eq.size:
            rows = [
                (str(("psi_eq", int(j))), float(v))
                for j, v in zip(self.nlp.psi_eq_idx, np.abs(c_eq))
                if v > self.opts.tolerance
            ] + rows
        raise InfeasibilityError(
            "restoration failed; the linearized constraints stay inconsistent",
            violations=sorted(rows, key=lambda t: -abs(t[1])),
        )


def _build_solution(nlp: DiscreteNlp, z, kkt, lin, duals, status, iterations,
                    tolerance, wall_time, warm_active) -> Solution:
    eta, nu_vec, mu, lam_psi_eq = duals
    problem = nlp.problem
    N, nx = nlp.N, nlp.nx
    states, inputs = nlp.unpack(z)

    adjoints = np.zeros((N + 1, nx))
    adjoints[0] = -eta
    if problem.time_mode == "discrete":
        adjoints[1:] = nu_vec
    else:
        for k in range(1, N):
            adjoints[k] = 0.5 * (nu_vec[k - 1] + nu_vec[k])
        lam_T = problem.phi_x(states[-1])[0].copy()
        row = N * nlp.n_path
        if nlp.psi_ineq_idx.size:
            lam_T += lin["psi_x"][nlp.psi_ineq_idx].T @ mu[row : row + nlp.psi_ineq_idx.size]
            row += nlp.psi_ineq_idx.size
        if problem.n_terminal_box:
            lam_T += lin["term_box_x"].T @ mu[row:]
        if nlp.psi_eq_idx.size:
            lam_T += lin["psi_x"][nlp.psi_eq_idx].T @ lam_psi_eq
        adjoints[N] = lam_T

    if nlp.n_path:
        mu_path = mu[: N * nlp.n_path].reshape(N, nlp.n_path).copy()
        if problem.time_mode == "continuous":
            mu_path /= nlp.steps[:, None]
    else:
        mu_path = np.zeros((N, 0))

    # terminal multipliers ordered [psi rows in index order, terminal box rows]
    term = np.zeros(problem.n_psi + problem.n_terminal_box)
    row = N * nlp.n_path
    for pos, j in enumerate(nlp.psi_ineq_idx):
        term[j] = mu[row + pos]
    row += nlp.psi_ineq_idx.size
    for pos, j in enumerate(nlp.psi_eq_idx):
        term[j] = lam_psi_eq[pos]
    if problem.n_terminal_box:
        term[problem.n_psi :] = mu[row:]

    objective = float(lin["objective"])
    return Solution(
        grid=nlp.grid,
        states=states,
        inputs=inputs,
        adjoints=adjoints,
        multipliers=mu_path,
        terminal_multipliers=term,
        objective=objective,
        solver_tolerance=tolerance,
        metadata={
            "status": status,
            "iterations": iterations,
            "kkt": kkt,
            "wall_time": wall_time,
            "active_set": np.where(warm_active)[0].tolist() if warm_active is not None else [],
            "problem": problem.name,
            "time_mode": problem.time_mode,
            "mayer_value": objective - nlp.running_cost(states, inputs),
        },
    )


def solve_trajectory(problem: OcpProblem, grid: Optional[TimeGrid] = None,
                     guess: Optional[Solution] = None,
                     tolerance: float = 1e-8, max_iterations: int = 500,
                     options: Optional[SqpOptions] = None) -> Solution:
    """Solve the transcribed OCP and return the primal-dual trajectory.

    The default initial guess holds the box-clamped initial state and the
    input-box midpoint constant over the horizon.  A previous
    :class:`Solution` may be passed as ``guess``; it is resampled onto the
    grid and its active set seeds the first QP (receding-horizon warm start).
    """
    if grid is None:
        grid = default_grid(problem)
    nlp = transcribe(problem, grid)
    opts = options or SqpOptions(tolerance=tolerance, max_iterations=max_iterations)

    warm_active = None
    if guess is not None:
        _, U0 = _resample_solution(guess, grid)
        U0 = problem.clamp_input(U0)
        active_ids = guess.metadata.get("active_set")
        if active_ids is not None and len(guess.grid) == len(grid):
            warm_active = np.zeros(nlp.n_ineq, dtype=bool)
            ids = np.asarray(active_ids, dtype=int)
            warm_active[ids[ids < nlp.n_ineq]] = True
    else:
        U0 = np.tile(problem.input_midpoint(), (nlp.N, 1))

    t0 = time.perf_counter()
    solver = _CondensedSqp(nlp, opts)
    z, kkt, lin, duals, status, iterations = solver.run(U0, warm_active)
    wall = time.perf_counter() - t0

    sol = _build_solution(
        nlp, z, kkt, lin, duals, status, iterations,
        opts.tolerance, wall, solver.warm_active,
    )
    if status not in ("optimal", "stalled"):
        raise ConvergenceError(
            f"sqp terminated with status {status!r} after {iterations} iterations",
            best=sol, residuals=kkt, iterations=iterations,
        )
    return sol
