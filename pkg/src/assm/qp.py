"""Box-constrained quadratic programming by operator splitting.

Solves

    minimize    ½ xᵀP x + qᵀx
    subject to  l ≤ A x ≤ u

with the fixed-penalty ADMM iteration of the operator-splitting school:
one KKT factorization up front, then cheap triangular solves per sweep.
The planner's horizon QPs are small (tens of variables), so robustness
and warm-start behavior matter far more than per-iteration cost.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import scipy.linalg

from .errors import InfeasibleHorizon, NumericalFailure

Array = np.ndarray


@dataclass
class QPSolution:
    x: Array
    y: Array  # multipliers for l ≤ Ax ≤ u
    iterations: int
    primal_residual: float
    dual_residual: float


@dataclass
class BoxQP:
    """One QP instance; keeps the KKT factorization for re-solves.

    The penalty ρ is fixed (no adaptive rescaling): instead, the problem
    data are Ruiz-equilibrated once up front, which evens out the wildly
    different row scales a condensed multi-step horizon produces and
    keeps the static factorization deterministic.  Badly conditioned
    instances where the dual plateaus are finished by an active-set
    polish — the bound pattern read off the multiplier signs, the reduced
    KKT system solved directly — and the polished pair is returned only
    when it certifiably passes the same KKT tolerance.
    """

    P: Array
    q: Array
    A: Array
    l: Array
    u: Array
    rho: float = 0.1
    sigma: float = 1e-6
    tol: float = 1e-6
    max_iter: int = 5000
    _kkt: tuple = field(init=False, repr=False)
    _scaled: tuple = field(init=False, repr=False)
    _d: tuple = field(init=False, repr=False)

    def __post_init__(self) -> None:
        self.P = np.asarray(self.P, dtype=float)
        self.q = np.asarray(self.q, dtype=float)
        self.A = np.atleast_2d(np.asarray(self.A, dtype=float))
        self.l = np.asarray(self.l, dtype=float)
        self.u = np.asarray(self.u, dtype=float)
        n, m = self.P.shape[0], self.A.shape[0]
        if self.A.shape[1] != n or self.l.shape != (m,) or self.u.shape != (m,):
            raise NumericalFailure("QP dimensions disagree")
        if np.any(self.l > self.u + 1e-12):
            raise InfeasibleHorizon("constraint bounds cross: l > u")
        kkt_pattern = np.zeros((n + m, n + m))
        kkt_pattern[:n, :n] = self.P
        kkt_pattern[:n, n:] = self.A.T
        kkt_pattern[n:, :n] = self.A
        d = np.ones(n + m)
        for _ in range(15):
            scaled = kkt_pattern * d[:, None] * d[None, :]
            norms = np.max(np.abs(scaled), axis=0)
            norms[norms == 0.0] = 1.0
            d /= np.sqrt(norms)
        d_var, d_con = d[:n], d[n:]
        P_s = self.P * d_var[:, None] * d_var[None, :]
        q_s = self.q * d_var
        c_obj = 1.0 / max(
            float(np.abs(P_s).max(initial=0.0)),
            float(np.abs(q_s).max(initial=0.0)),
            1e-10,
        )
        P_s = P_s * c_obj
        q_s = q_s * c_obj
        A_s = self.A * d_con[:, None] * d_var[None, :]
        self._scaled = (P_s, q_s, A_s, self.l * d_con, self.u * d_con)
        self._d = (d_var, d_con, c_obj)
        kkt = np.zeros((n + m, n + m))
        kkt[:n, :n] = P_s + self.sigma * np.eye(n)
        kkt[:n, n:] = A_s.T
        kkt[n:, :n] = A_s
        kkt[n:, n:] = -np.eye(m) / self.rho
        self._kkt = scipy.linalg.lu_factor(kkt)
        self._is_box = m == n and np.array_equal(self.A, np.eye(n))

    def _residuals(self, x_u: Array, y_u: Array, z_u: Array):
        Ax = self.A @ x_u
        Px = self.P @ x_u
        Aty = self.A.T @ y_u
        r_prim = float(np.max(np.abs(Ax - z_u), initial=0.0))
        r_dual = float(np.max(np.abs(Px + self.q + Aty), initial=0.0))
        eps_p = self.tol * (
            1.0 + float(np.max(np.abs(np.concatenate([Ax, z_u])), initial=0.0))
        )
        eps_d = self.tol * (
            1.0
            + float(np.max(np.abs(np.concatenate([Px, self.q, Aty])), initial=0.0))
        )
        return r_prim <= eps_p and r_dual <= eps_d, r_prim, r_dual

    def _eq_solve(self, low: Array, upp: Array):
        """Regularized equality-KKT solve on the guessed active rows."""
        n, m = self.P.shape[0], self.A.shape[0]
        A_act = np.vstack([self.A[low], self.A[upp]])
        b_act = np.concatenate([self.l[low], self.u[upp]])
        k = A_act.shape[0]
        delta = 1e-9
        kkt = np.zeros((n + k, n + k))
        kkt[:n, :n] = self.P + delta * np.eye(n)
        kkt[:n, n:] = A_act.T
        kkt[n:, :n] = A_act
        kkt[n:, n:] = -delta * np.eye(k)
        rhs = np.concatenate([-self.q, b_act])
        try:
            fac = scipy.linalg.lu_factor(kkt)
            sol = scipy.linalg.lu_solve(fac, rhs)
            for _ in range(3):  # refine against the unregularized system
                resid = rhs.copy()
                resid[:n] -= self.P @ sol[:n] + A_act.T @ sol[n:]
                resid[n:] -= A_act @ sol[:n]
                sol = sol + scipy.linalg.lu_solve(fac, resid)
        except (scipy.linalg.LinAlgError, ValueError):
            return None, None
        if not np.all(np.isfinite(sol)):
            return None, None
        x_p = sol[:n]
        nu = sol[n:]
        y_p = np.zeros(m)
        y_p[low] = nu[: int(low.sum())]
        y_p[upp] = nu[int(low.sum()) :]
        return x_p, y_p

    def _box_descent(self, z_u: Array) -> QPSolution | None:
        """Finish a stalled pure-box iterate by feasible active-set descent.

        Starts from the clipped split iterate, takes Newton steps on the
        free subspace with ratio tests so every point stays feasible, and
        changes the working set one row at a time.  Strictly monotone
        descent of a strictly convex objective cannot cycle.  Returns only
        a point that passes the full KKT certification.
        """
        P, q, l, u = self.P, self.q, self.l, self.u
        n = P.shape[0]
        x = np.clip(z_u, l, u)
        at_l = x <= l  # exact: clip writes the bound values through
        at_u = x >= u
        face_solved = False
        for _ in range(10 * n + 20):
            g = P @ x + q
            free = ~(at_l | at_u)
            if face_solved or not np.any(free):
                # release the single worst wrong-signed row, if any
                lam_tol = self.tol * (1.0 + float(np.max(np.abs(g))))
                bad = (at_l & (g < -lam_tol)) | (at_u & (g > lam_tol))
                if not np.any(bad):
                    break
                worst = int(np.argmax(np.where(bad, np.abs(g), -np.inf)))
                at_l[worst] = False
                at_u[worst] = False
                face_solved = False
                continue
            p = np.zeros(n)
            Pff = P[np.ix_(free, free)]
            try:
                p[free] = scipy.linalg.solve(Pff, -g[free], assume_a="pos")
            except (scipy.linalg.LinAlgError, ValueError):
                p[free] = scipy.linalg.lstsq(Pff, -g[free])[0]
            if float(np.max(np.abs(p))) <= 1e-12 * (1.0 + float(np.max(np.abs(x)))):
                face_solved = True
                continue
            alpha, blocker, hit_low = 1.0, -1, False
            for idx in np.where(free & (p != 0.0))[0]:
                lim = (
                    (u[idx] - x[idx]) / p[idx]
                    if p[idx] > 0.0
                    else (l[idx] - x[idx]) / p[idx]
                )
                if lim < alpha:
                    alpha, blocker, hit_low = lim, idx, p[idx] < 0.0
            x = x + alpha * p
            if blocker >= 0:
                if hit_low:
                    x[blocker] = l[blocker]
                    at_l[blocker] = True
                else:
                    x[blocker] = u[blocker]
                    at_u[blocker] = True
            else:
                # a full unblocked Newton step solves the current face
                face_solved = True
        else:
            return None
        g = P @ x + q
        y = np.where(at_l | at_u, -g, 0.0)
        ok, r_prim, r_dual = self._residuals(x, y, x.copy())
        if not ok:
            return None
        return QPSolution(x, y, 0, r_prim, r_dual)

    def _polish(self, y_u: Array, z_u: Array) -> QPSolution | None:
        """Finish a stalled iterate by refining its guessed active set.

        Pure boxes go through :meth:`_box_descent`.  Otherwise the
        set is seeded from the multiplier signs; each round drops
        wrong-signed rows, else adds the single most-violated bound, and
        re-solves the reduced equality system.  Returns only a pair that
        passes the full KKT certification; otherwise the splitting
        iteration continues.
        """
        if self._is_box:
            return self._box_descent(z_u)
        m = self.A.shape[0]
        eq = (self.u - self.l) <= 1e-12  # pinned rows stay active throughout
        low = (y_u < 0.0) & ~eq
        upp = (y_u > 0.0) | eq
        seen = set()
        feas = self.tol * (
            1.0
            + float(
                np.max(np.abs(np.concatenate([self.l, self.u])[np.isfinite(
                    np.concatenate([self.l, self.u]))]), initial=0.0)
            )
        )
        for _ in range(3 * m + 10):
            key = (low.tobytes(), upp.tobytes())
            if key in seen:  # active-set cycle: give the iteration back
                return None
            seen.add(key)
            x_p, y_p = self._eq_solve(low, upp)
            if x_p is None:
                return None
            slack = self.tol * (1.0 + float(np.max(np.abs(y_p), initial=0.0)))
            drop_low = low & (y_p > slack)
            drop_upp = upp & ~eq & (y_p < -slack)
            if np.any(drop_low) or np.any(drop_upp):
                low = low & ~drop_low
                upp = upp & ~drop_upp
                continue
            Ax = self.A @ x_p
            viol = np.maximum(self.l - Ax, Ax - self.u)
            viol[low | upp] = -np.inf
            worst = int(np.argmax(viol))
            if viol[worst] > feas:
                if self.l[worst] - Ax[worst] > Ax[worst] - self.u[worst]:
                    low[worst] = True
                else:
                    upp[worst] = True
                continue
            z_p = np.clip(Ax, self.l, self.u)
            ok, r_prim, r_dual = self._residuals(x_p, y_p, z_p)
            if not ok:
                return None
            return QPSolution(x_p, y_p, 0, r_prim, r_dual)
        return None

    def solve(self, x0: Array | None = None, y0: Array | None = None) -> QPSolution:
        n, m = self.P.shape[0], self.A.shape[0]
        d_var, d_con, c_obj = self._d
        P_s, q_s, A_s, l_s, u_s = self._scaled
        x = np.zeros(n) if x0 is None else np.asarray(x0, dtype=float) / d_var
        y = np.zeros(m) if y0 is None else np.asarray(y0, dtype=float) * c_obj / d_con
        z = np.clip(A_s @ x, l_s, u_s)
        rhs = np.empty(n + m)
        r_prim = r_dual = np.inf
        for it in range(1, self.max_iter + 1):
            rhs[:n] = self.sigma * x - q_s
            rhs[n:] = z - y / self.rho
            sol = scipy.linalg.lu_solve(self._kkt, rhs)
            x = sol[:n]
            z_tilde = z + (sol[n:] - y) / self.rho
            z = np.clip(z_tilde + y / self.rho, l_s, u_s)
            y = y + self.rho * (z_tilde - z)
            if it % 10 == 0 or it == self.max_iter:
                x_u = d_var * x
                y_u = d_con * y / c_obj
                z_u = z / d_con
                ok, r_prim, r_dual = self._residuals(x_u, y_u, z_u)
                if ok:
                    return QPSolution(x_u, y_u, it, r_prim, r_dual)
                if it % 50 == 0 and it >= 50:
                    polished = self._polish(y_u, z_u)
                    if polished is not None:
                        return QPSolution(
                            polished.x,
                            polished.y,
                            it,
                            polished.primal_residual,
                            polished.dual_residual,
                        )
        raise NumericalFailure(
            f"QP stalled: residuals ({r_prim:.2e}, {r_dual:.2e}) after "
            f"{self.max_iter} iterations"
        )


def solve_box_qp(
    P: Array,
    q: Array,
    A: Array,
    l: Array,
    u: Array,
    warm: tuple | None = None,
    tol: float = 1e-6,
    max_iter: int = 5000,
) -> QPSolution:
    """One-shot helper around :class:`BoxQP`."""
    prob = BoxQP(P, q, A, l, u, tol=tol, max_iter=max_iter)
    if warm is None:
        return prob.solve()
    return prob.solve(x0=warm[0], y0=warm[1])
