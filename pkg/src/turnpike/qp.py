"""Dense convex QP solver built on an active-set NNLS core.

Solves ``min 0.5 w'Hw + g'w  s.t.  C w = d,  M w <= v`` for symmetric
positive-definite ``H`` by eliminating the equalities (QR), mapping the rest
to a least-distance program and running Lawson-Hanson nonnegative least
squares on the normal equations.  The NNLS passive set doubles as the QP
active set and can be warm-started, which makes repeated solves with a
slowly changing active set (SQP iterations, receding-horizon steps) cheap.

KKT convention: ``H w + g + C' lam + M' mu = 0`` with ``mu >= 0`` and
``mu_i (M w - v)_i = 0``.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import numpy as np
from scipy.linalg import cho_solve, cholesky, qr, solve_triangular

from .errors import ConvergenceError


def nnls_warm(EtE, Etf, passive: Optional[np.ndarray] = None,
              max_iter: Optional[int] = None, tol: Optional[float] = None):
    """Nonnegative least squares on precomputed normal equations.

    Minimizes ``||E q - f||`` over ``q >= 0`` given ``EtE = E'E`` and
    ``Etf = E'f``.  ``passive`` is an optional boolean mask seeding the
    passive (strictly positive) set.  Returns ``(q, passive_mask)``.
    """
    m = EtE.shape[0]
    if max_iter is None:
        max_iter = max(50, 10 * m)
    if tol is None:
        tol = 1e-11 * max(1.0, float(np.max(np.abs(Etf))) if m else 1.0)
    q = np.zeros(m)
    P = np.zeros(m, dtype=bool)
    if passive is not None and passive.any():
        P = passive.copy()

    def restricted_solve(mask):
        idx = np.where(mask)[0]
        A = EtE[np.ix_(idx, idx)]
        b = Etf[idx]
        try:
            return idx, np.linalg.solve(A, b)
        except np.linalg.LinAlgError:
            ridge = 1e-13 * max(1.0, float(np.trace(A)) / max(1, idx.size))
            return idx, np.linalg.solve(A + ridge * np.eye(idx.size), b)

    def inner_feasibility():
        """Pull the passive-set LS solution back into q >= 0."""
        nonlocal q, P
        for _ in range(m + 10):
            if not P.any():
                q[:] = 0.0
                return
            idx, qP = restricted_solve(P)
            if np.all(qP > tol):
                q[:] = 0.0
                q[idx] = qP
                return
            # step toward qP until the first passive component hits zero
            cur = q[idx]
            bad = qP <= tol
            denom = cur - qP
            with np.errstate(divide="ignore", invalid="ignore"):
                ratios = np.where(bad & (denom > 0), cur / denom, np.inf)
            alpha = float(np.min(ratios))
            alpha = min(max(alpha, 0.0), 1.0)
            q[idx] = cur + alpha * (qP - cur)
            drop = idx[q[idx] <= tol]
            q[drop] = 0.0
            P[drop] = False
        raise ConvergenceError("nnls inner loop failed to restore feasibility")

    if P.any():
        inner_feasibility()

    taboo: set = set()
    for _ in range(max_iter):
        w = Etf - EtE @ q
        w[P] = -np.inf
        if taboo:
            w[list(taboo)] = -np.inf
        j = int(np.argmax(w)) if m else 0
        if m == 0 or w[j] <= tol:
            return q, P
        P[j] = True
        inner_feasibility()
        if not P[j] and q[j] <= tol:
            # degenerate candidate (added and immediately dropped): skip it
            # until some other column makes progress
            taboo.add(j)
            continue
        taboo.clear()
    raise ConvergenceError("nnls outer loop hit the iteration limit")


def solve_ldp(Gm, hv, warm: Optional[np.ndarray] = None):
    """Least-distance program ``min ||s||  s.t.  Gm s >= hv``.

    Returns ``(s, z, passive)`` with multipliers ``z >= 0`` satisfying
    ``s = Gm' z``; raises :class:`ConvergenceError` tagged infeasible when
    the constraints are inconsistent.  Columns are normalized before the
    NNLS stage and the result is verified against the constraints; on a
    verification failure the reference NNLS from scipy is used instead.
    """
    mrows, n = Gm.shape
    E = np.vstack([Gm.T, hv[None, :]])
    fvec = np.zeros(n + 1)
    fvec[-1] = 1.0
    col_scale = np.sqrt(np.sum(E * E, axis=0))
    col_scale[col_scale < 1e-300] = 1.0
    Es = E / col_scale
    EtE = Es.T @ Es
    Etf = hv / col_scale

    def finish(q, passive):
        r = Es @ q - fvec
        rnorm2 = float(r @ r)
        if rnorm2 <= 1e-12 * (1.0 + (float(np.max(np.abs(hv))) if hv.size else 0.0)):
            err = ConvergenceError("least-distance subproblem infeasible")
            err.infeasible = True
            raise err
        s = -r[:n] / r[-1]
        z = (q / col_scale) / rnorm2
        return s, z, passive

    try:
        q, passive = nnls_warm(EtE, Etf, passive=warm)
        s, z, passive = finish(q, passive)
        viol = hv - Gm @ s
        vtol = 1e-8 * (1.0 + (float(np.max(np.abs(hv))) if hv.size else 0.0))
        if not mrows or float(np.max(viol)) <= vtol:
            return s, z, passive
    except ConvergenceError as exc:
        if getattr(exc, "infeasible", False):
            raise

    from scipy.optimize import nnls as scipy_nnls

    q, _ = scipy_nnls(Es, fvec, maxiter=20 * max(1, mrows))
    return finish(q, q > 1e-14)


@dataclass
class QpResult:
    w: np.ndarray
    eq_multipliers: np.ndarray
    ineq_multipliers: np.ndarray
    active: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=bool))
    status: str = "optimal"


def solve_qp(H, g, C=None, d=None, M=None, v=None,
             warm_active: Optional[np.ndarray] = None) -> QpResult:
    """Solve the dense convex QP; see module docstring for the convention."""
    n = H.shape[0]
    g = np.asarray(g, dtype=float).reshape(n)
    has_eq = C is not None and np.size(C) > 0
    has_ineq = M is not None and np.size(M) > 0

    if has_eq:
        C = np.atleast_2d(np.asarray(C, dtype=float))
        d = np.asarray(d, dtype=float).reshape(C.shape[0])
        me = C.shape[0]
        Qfull, Rfull = qr(C.T, mode="full")
        R1 = Rfull[:me, :]
        Q1 = Qfull[:, :me]
        Z2 = Qfull[:, me:]
        try:
            y1 = solve_triangular(R1.T, d, lower=True)
        except Exception as exc:
            err = ConvergenceError(f"degenerate equality rows: {exc}")
            err.infeasible = True
            raise err
        w_p = Q1 @ y1
        n_red = Z2.shape[1]
    else:
        me = 0
        Z2 = None  # identity; skipped in the products below
        w_p = np.zeros(n)
        n_red = n

    if has_ineq:
        M = np.atleast_2d(np.asarray(M, dtype=float))
        v = np.asarray(v, dtype=float).reshape(M.shape[0])

    if n_red == 0:
        w = w_p
        mu = np.zeros(M.shape[0]) if has_ineq else np.zeros(0)
        if has_ineq and np.any(M @ w - v > 1e-9 * (1.0 + np.abs(v))):
            err = ConvergenceError("equality-determined point violates inequalities")
            err.infeasible = True
            raise err
        active = np.zeros(mu.shape, dtype=bool)
        lam = _equality_multipliers(H, g, w, M, mu, Q1, R1) if has_eq else np.zeros(0)
        return QpResult(w, lam, mu, active)

    if Z2 is not None:
        Hr = Z2.T @ (H @ Z2)
        gr = Z2.T @ (H @ w_p + g)
    else:
        Hr = H
        gr = g
    Hr = 0.5 * (Hr + Hr.T)
    jitter = 0.0
    scale = max(1.0, float(np.trace(Hr)) / n_red)
    for attempt in range(6):
        try:
            L = cholesky(Hr + jitter * np.eye(n_red), lower=True)
            break
        except np.linalg.LinAlgError:
            jitter = scale * (1e-12 if jitter == 0.0 else jitter / scale * 100.0)
    else:
        raise ConvergenceError("reduced Hessian not positive definite")

    if not has_ineq:
        y = cho_solve((L, True), -gr)
        w = w_p + Z2 @ y if Z2 is not None else y
        lam = _equality_multipliers(H, g, w, None, None, Q1, R1) if has_eq else np.zeros(0)
        return QpResult(w, lam, np.zeros(0), np.zeros(0, dtype=bool))

    if Z2 is not None:
        Mr = M @ Z2
        vr = v - M @ w_p
    else:
        Mr = M
        vr = v
    Y = solve_triangular(L, Mr.T, lower=True)
    Gm_ldp = -Y.T
    u0 = cho_solve((L, True), gr)
    hv_ldp = -(vr + Mr @ u0)
    s, z, passive = solve_ldp(Gm_ldp, hv_ldp, warm=warm_active)
    t = solve_triangular(L, gr, lower=True)
    y = solve_triangular(L.T, s - t, lower=False)
    w = w_p + Z2 @ y if Z2 is not None else y
    mu = z
    active = passive.copy()
    lam = _equality_multipliers(H, g, w, M, mu, Q1, R1) if has_eq else np.zeros(0)
    return QpResult(w, lam, mu, active)


def _equality_multipliers(H, g, w, M, mu, Q1, R1):
    resid = -(H @ w + g)
    if M is not None and mu is not None and mu.size:
        resid = resid - M.T @ mu
    return solve_triangular(R1, Q1.T @ resid, lower=False)
