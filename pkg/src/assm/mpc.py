"""Receding-horizon control on sampled reduced models.

The planner discretizes the reduced model handed over by the dictionary
(or a baseline), solves each horizon's tracking problem by sequential
convex programming — linearize, trust region, ℓ1-softened keep-out
half-spaces — and applies the plan to the true simulator.  Static
feedback laws (the Koopman pregain baseline) run through the identical
application loop and metrics so ISE numbers are directly comparable.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field, replace

import numpy as np

from .dictionary import assm_model_at
from .dynamics import DynamicsModel, Trajectory, find_equilibrium, integrate_ode
from .errors import (
    InfeasibleHorizon,
    NumericalFailure,
    ValidationError,
)
from .qp import BoxQP
from .ssm import monomial_basis, monomial_jacobian
from .targets import TargetTrack

Array = np.ndarray


# ---------------------------------------------------------------------------
# problem specification
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class KeepOut:
    """Spherical keep-out region in workspace coordinates."""

    center: Array
    radius: float

    def __post_init__(self) -> None:
        object.__setattr__(self, "center", np.asarray(self.center, dtype=float))
        if self.radius <= 0:
            raise ValidationError("keep-out radius must be positive")

    def penetration(self, z: Array) -> Array:
        """Depth by which points sit inside the sphere (0 outside)."""
        dist = np.linalg.norm(np.atleast_2d(z.T).T - self.center[:, None], axis=0)
        return np.maximum(0.0, self.radius - dist)


@dataclass(frozen=True)
class OCPSpec:
    """Horizon layout, costs, constraints, and solver settings.

    ``dt`` is the planning-horizon span; each horizon is integrated in
    ``n_sub`` zero-order-hold substeps.  ``n_apply`` substeps of every plan
    are applied before re-planning (default: the whole horizon).
    """

    dt: float = 0.02
    n_sub: int = 2
    Q_z: Array | None = None  # defaults to identity at solve time
    R_u: Array | None = None  # defaults to 0.001·identity
    keep_outs: tuple = ()
    n_apply: int | None = None
    scp_max_iter: int = 20
    scp_tol: float = 1e-5
    trust_radius: float = 1.0
    trust_max: float = 8.0
    slack_penalty: float = 1e3
    slack_budget: float = 0.1
    qp_tol: float = 1e-6
    qp_max_iter: int = 5000

    def __post_init__(self) -> None:
        if self.dt <= 0 or self.n_sub < 1:
            raise ValidationError("horizon must have positive span and substeps")
        if self.n_apply is not None and not 1 <= self.n_apply <= self.n_sub:
            raise ValidationError("n_apply must lie in [1, n_sub]")
        for name, M, strict in (("Q_z", self.Q_z, False), ("R_u", self.R_u, True)):
            if M is None:
                continue
            M = np.asarray(M, dtype=float)
            object.__setattr__(self, name, M)
            eig = np.linalg.eigvalsh(0.5 * (M + M.T))
            if eig.min() < (1e-12 if strict else -1e-12):
                kind = "positive definite" if strict else "positive semidefinite"
                raise ValidationError(f"{name} must be {kind}")

    @property
    def dt_sub(self) -> float:
        return self.dt / self.n_sub

    @property
    def applied_substeps(self) -> int:
        return self.n_apply if self.n_apply is not None else self.n_sub


# ---------------------------------------------------------------------------
# discrete plan models
# ---------------------------------------------------------------------------


class DiscreteReducedModel:
    """Exact RK4 step map of ṙ = rhs(r, u) under zero-order-hold input.

    Step Jacobians come from central finite differences on the step map —
    the planner never needs the continuous model's internals.
    """

    def __init__(self, rhs, d: int, n_u: int, dt_sub: float):
        self.rhs = rhs
        self.d = int(d)
        self.n_u = int(n_u)
        self.dt_sub = float(dt_sub)

    def step(self, r: Array, u: Array) -> Array:
        h = self.dt_sub
        k1 = self.rhs(r, u)
        k2 = self.rhs(r + 0.5 * h * k1, u)
        k3 = self.rhs(r + 0.5 * h * k2, u)
        k4 = self.rhs(r + h * k3, u)
        return r + (h / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)

    def jacobians(self, r: Array, u: Array) -> tuple:
        A = np.empty((self.d, self.d))
        B = np.empty((self.d, self.n_u))
        for i in range(self.d):
            h = 1e-6 * (1.0 + abs(r[i]))
            e = np.zeros(self.d)
            e[i] = h
            A[:, i] = (self.step(r + e, u) - self.step(r - e, u)) / (2.0 * h)
        for i in range(self.n_u):
            h = 1e-6 * (1.0 + abs(u[i]))
            e = np.zeros(self.n_u)
            e[i] = h
            B[:, i] = (self.step(r, u + e) - self.step(r, u - e)) / (2.0 * h)
        return A, B


class ASSMPlanModel(DiscreteReducedModel):
    """Discrete reduced model with the lifted workspace output attached."""

    def __init__(self, model, extractor: Array, dt_sub: float):
        super().__init__(model.reduced_rhs, model.d, model.B.shape[1], dt_sub)
        self.model = model
        self.extractor = np.asarray(extractor, dtype=float)

    def output(self, r: Array) -> Array:
        return self.extractor @ self.model.lift(r)

    def output_jacobian(self, r: Array) -> Array:
        J = monomial_jacobian(r, self.model.n_w)
        return self.extractor @ self.model.W @ J


def discretize_model(model, extractor: Array, dt_sub: float) -> ASSMPlanModel:
    """Wrap an anchored static SSM model for horizon planning."""
    return ASSMPlanModel(model, extractor, dt_sub)


# ---------------------------------------------------------------------------
# sequential convex programming
# ---------------------------------------------------------------------------


@dataclass
class SCPResult:
    u_total: Array  # (n_u, N) inputs over the horizon
    z_pred: Array  # (w, N) predicted workspace at substep ends
    cost: float
    iterations: int
    converged: bool
    max_violation: float
    qp_warm: tuple | None = None  # (x, y) handed to the next horizon's QPs


def _rollout(plan, r0: Array, U_dev: Array):
    N = U_dev.shape[1]
    R = np.empty((plan.d, N + 1))
    Z = np.empty((plan.output(r0).size, N))
    R[:, 0] = r0
    for k in range(N):
        R[:, k + 1] = plan.step(R[:, k], U_dev[:, k])
        Z[:, k] = plan.output(R[:, k + 1])
    return R, Z


def _stage_cost(spec, Z, U_dev, u_s0, gamma, Q, Ru):
    dz = Z - gamma
    uu = u_s0[:, None] + U_dev
    return float(
        (np.einsum("ik,ij,jk->", dz, Q, dz) + np.einsum("ik,ij,jk->", uu, Ru, uu))
        * spec.dt_sub
    )


def _violations(spec, Z):
    if not spec.keep_outs:
        return np.zeros(Z.shape[1])
    pens = np.vstack([ko.penetration(Z) for ko in spec.keep_outs])
    return pens.max(axis=0)


def solve_ocp_scp(
    spec: OCPSpec,
    plan,
    r0: Array,
    u_s0: Array,
    input_box: Array,
    gamma: Array,
    warm_start: Array | None = None,
    qp_warm: tuple | None = None,
) -> SCPResult:
    """Solve one horizon's tracking problem about the handed-over model.

    Iterates linearize → trust-region QP → merit test.  The objective is
    the substep-discretized tracking cost with the *total* input penalized,
    Σ(‖z−Γ‖²_Qz + ‖u_s0+u_d‖²_Ru)·dt_sub; keep-out spheres enter as
    linearized half-spaces with ℓ1 slack, and accepted iterates never
    increase the penalized merit.
    """
    N = spec.n_sub
    w = gamma.shape[0]
    if gamma.shape[1] != N:
        raise ValidationError("target slice does not cover the horizon")
    Q = spec.Q_z if spec.Q_z is not None else np.eye(w)
    Ru = spec.R_u if spec.R_u is not None else 0.001 * np.eye(plan.n_u)
    if Q.shape != (w, w):
        raise ValidationError("Q_z size does not match the workspace")

    lo = input_box[:, 0] - u_s0
    hi = input_box[:, 1] - u_s0
    if np.any(lo > hi):
        raise InfeasibleHorizon("steady input outside the admissible box")
    U = (
        np.clip(warm_start - u_s0[:, None], lo[:, None], hi[:, None])
        if warm_start is not None
        else np.tile(np.clip(np.zeros(plan.n_u), lo, hi)[:, None], (1, N))
    )

    R_inc, Z_inc = _rollout(plan, r0, U)
    cost = _stage_cost(spec, Z_inc, U, u_s0, gamma, Q, Ru)
    merit = cost + spec.slack_penalty * _violations(spec, Z_inc).sum()
    radius = spec.trust_radius
    n_var = plan.n_u * N
    converged = False
    iterations = 0

    for it in range(1, spec.scp_max_iter + 1):
        iterations = it
        # sensitivities of z_{k+1} w.r.t. the stacked input deviations
        M = np.zeros((plan.d, n_var))
        E = np.empty((N, w, n_var))
        H = np.zeros((n_var, n_var))
        g = np.zeros(n_var)
        for k in range(N):
            A_k, B_k = plan.jacobians(R_inc[:, k], U[:, k])
            M = A_k @ M
            M[:, k * plan.n_u : (k + 1) * plan.n_u] += B_k
            Zj = plan.output_jacobian(R_inc[:, k + 1])
            E[k] = Zj @ M
            H += 2.0 * spec.dt_sub * E[k].T @ Q @ E[k]
            g += 2.0 * spec.dt_sub * E[k].T @ Q @ (Z_inc[:, k] - gamma[:, k])
            sl = slice(k * plan.n_u, (k + 1) * plan.n_u)
            H[sl, sl] += 2.0 * spec.dt_sub * Ru
            g[sl] += 2.0 * spec.dt_sub * Ru @ (u_s0 + U[:, k])

        # variable stacking is substep-major: block k holds δu_k
        d_lo = np.maximum(lo[:, None] - U, -radius).T.ravel()
        d_hi = np.minimum(hi[:, None] - U, radius).T.ravel()

        rows, rhs = [], []
        for k in range(N):
            for ko in spec.keep_outs:
                delta = Z_inc[:, k] - ko.center
                dist = float(np.linalg.norm(delta))
                normal = delta / dist if dist > 1e-12 else np.eye(w)[0]
                rows.append(-normal @ E[k])
                rhs.append(dist - ko.radius)
        n_con = len(rows)
        if n_con:
            P_qp = np.zeros((n_var + n_con, n_var + n_con))
            P_qp[:n_var, :n_var] = H
            q_qp = np.concatenate([g, spec.slack_penalty * np.ones(n_con)])
            A_qp = np.zeros((n_var + 2 * n_con, n_var + n_con))
            A_qp[:n_var, :n_var] = np.eye(n_var)
            A_qp[n_var : n_var + n_con, :n_var] = np.asarray(rows)
            A_qp[n_var : n_var + n_con, n_var:] = -np.eye(n_con)
            A_qp[n_var + n_con :, n_var:] = np.eye(n_con)
            l_qp = np.concatenate([d_lo, -np.full(n_con, np.inf), np.zeros(n_con)])
            u_qp = np.concatenate([d_hi, np.asarray(rhs), np.full(n_con, np.inf)])
        else:
            P_qp, q_qp = H, g
            A_qp = np.eye(n_var)
            l_qp, u_qp = d_lo, d_hi
        qp = BoxQP(
            P_qp, q_qp, A_qp, l_qp, u_qp, tol=spec.qp_tol, max_iter=spec.qp_max_iter
        )
        if qp_warm is not None and qp_warm[0].size == P_qp.shape[0]:
            sol = qp.solve(x0=qp_warm[0], y0=qp_warm[1])
        else:
            sol = qp.solve()
        qp_warm = (sol.x, sol.y)
        step = sol.x[:n_var].reshape(N, plan.n_u).T

        U_cand = np.clip(U + step, lo[:, None], hi[:, None])
        R_cand, Z_cand = _rollout(plan, r0, U_cand)
        cost_cand = _stage_cost(spec, Z_cand, U_cand, u_s0, gamma, Q, Ru)
        merit_cand = cost_cand + spec.slack_penalty * _violations(spec, Z_cand).sum()

        if merit_cand <= merit + 1e-15:
            rel_drop = abs(merit - merit_cand) / max(1.0, abs(merit))
            U, R_inc, Z_inc = U_cand, R_cand, Z_cand
            cost, merit = cost_cand, merit_cand
            radius = min(radius * 2.0, spec.trust_max)
            if rel_drop <= spec.scp_tol:
                converged = True
                break
        else:
            radius *= 0.5
            if radius < 1e-10:
                break

    max_viol = float(_violations(spec, Z_inc).max(initial=0.0))
    if spec.keep_outs and max_viol > spec.slack_budget:
        raise InfeasibleHorizon(
            f"keep-out violation {max_viol:.3g} exceeds softening budget"
        )
    return SCPResult(
        u_total=u_s0[:, None] + U,
        z_pred=Z_inc,
        cost=cost,
        iterations=iterations,
        converged=converged,
        max_violation=max_viol,
        qp_warm=qp_warm,
    )


# ---------------------------------------------------------------------------
# planners
# ---------------------------------------------------------------------------


class ASSMPlanner:
    """Per-horizon local model factory over a dictionary or one of its views."""

    kind = "scp"

    def __init__(self, dictionary, label: str | None = None):
        self.dictionary = dictionary
        self.label = label if label is not None else dictionary.label

    def local_model(self, y_emb: Array, dt_sub: float):
        model, u_s0 = assm_model_at(self.dictionary, y_emb)
        plan = ASSMPlanModel(model, self.dictionary.manifold.extractor, dt_sub)
        r0 = model.chart(y_emb)
        flags = {"extrapolated": bool(getattr(model, "extrapolated", False))}
        return plan, r0, u_s0, flags


# ---------------------------------------------------------------------------
# receding-horizon loop
# ---------------------------------------------------------------------------


@dataclass
class MPCResult:
    """Closed-loop record at substep resolution plus per-plan solve stats."""

    label: str
    times: Array
    z: Array
    gamma: Array
    inputs: Array
    solve_times: Array
    scp_iterations: Array
    flags: list
    metrics: dict = field(default_factory=dict)


class _DelayBuffer:
    """Rolling history that materializes the embedded observable at `now`.

    Seeded by holding the initial observation for the full lag span, so
    the first horizons see a constant past.
    """

    def __init__(self, y0: Array, copies: int, lag_steps: int):
        self.copies = copies
        self.lag_steps = lag_steps
        depth = (copies - 1) * lag_steps + 1
        self.hist = [np.asarray(y0, dtype=float).copy() for _ in range(depth)]

    def push(self, y: Array) -> None:
        self.hist.append(np.asarray(y, dtype=float).copy())
        self.hist.pop(0)

    def embedded(self) -> Array:
        idx = [-1 - (self.copies - 1 - c) * self.lag_steps for c in range(self.copies)]
        return np.concatenate([self.hist[i] for i in idx])


def mpc_run(
    model_true: DynamicsModel,
    planner,
    spec: OCPSpec,
    target: TargetTrack,
    x0: Array | None = None,
    embedding_spec=None,
    integrate_dt: float = 1e-3,
) -> MPCResult:
    """Track the target with receding-horizon planning on the true simulator.

    Per horizon: embed the observed configuration from the rolling buffer,
    ask the planner for a local reduced model, solve the SCP problem warm-
    started from the previous plan, then apply ``n_apply`` substeps of the
    total input (hard-projected into the box) to the simulator.  Static
    feedback planners skip the SCP stage and compute the input per substep
    from the current observation.
    """
    t_i, t_f = target.horizon
    n_hor = (t_f - t_i) / spec.dt
    if abs(n_hor - round(n_hor)) > 1e-9:
        raise ValidationError("target horizon must be divisible by the planning dt")
    dt_sub = spec.dt_sub
    n_apply = spec.applied_substeps
    copies = 1 if embedding_spec is None else embedding_spec.copies
    if copies > 1:
        ratio = embedding_spec.lag / dt_sub
        if abs(ratio - round(ratio)) > 1e-9 or ratio < 1:
            raise ValidationError("embedding lag must be a multiple of the substep")
        lag_steps = int(round(ratio))
    else:
        lag_steps = 1

    n_int = int(round(dt_sub / integrate_dt))
    if abs(n_int * integrate_dt - dt_sub) > 1e-12 or n_int < 1:
        raise ValidationError("substep must be a multiple of the integration step")
    if x0 is None:
        x0 = find_equilibrium(model_true, np.zeros(model_true.n_u))
    x = np.asarray(x0, dtype=float).copy()
    buffer = _DelayBuffer(model_true.h(x), copies, lag_steps)
    C_ws = model_true.workspace_map

    n_steps_total = int(round((t_f - t_i) / dt_sub))
    w = C_ws.shape[0]
    times = t_i + dt_sub * np.arange(n_steps_total + 1)
    z_rec = np.empty((w, n_steps_total + 1))
    u_rec = np.empty((model_true.n_u, n_steps_total))
    gamma_rec = np.column_stack([target(t) for t in times])
    z_rec[:, 0] = C_ws @ model_true.h(x)

    solve_times, iter_counts, flags = [], [], []
    warm = None
    qp_warm = None
    box = model_true.input_box
    step_idx = 0
    while step_idx < n_steps_total:
        t_j = times[step_idx]
        y_emb = buffer.embedded()
        if planner.kind == "scp":
            gamma_slice = np.column_stack(
                [target(t_j + dt_sub * (k + 1)) for k in range(spec.n_sub)]
            )
            tic = time.perf_counter()
            plan, r0, u_s0, plan_flags = planner.local_model(y_emb, dt_sub)
            try:
                scp = solve_ocp_scp(
                    spec, plan, r0, u_s0, box, gamma_slice,
                    warm_start=warm, qp_warm=qp_warm,
                )
            except InfeasibleHorizon as exc:
                raise InfeasibleHorizon(f"horizon at t = {t_j:.4f} s: {exc}") from exc
            except NumericalFailure as exc:
                raise NumericalFailure(f"horizon at t = {t_j:.4f} s: {exc}") from exc
            qp_warm = scp.qp_warm
            solve_times.append(time.perf_counter() - tic)
            iter_counts.append(scp.iterations)
            plan_flags = dict(plan_flags)
            plan_flags["converged"] = scp.converged
            flags.append(plan_flags)
            u_plan = scp.u_total
            # shift the unapplied tail forward as the next warm start
            warm = np.column_stack(
                [u_plan[:, min(k + n_apply, spec.n_sub - 1)] for k in range(spec.n_sub)]
            )
        else:
            u_plan = None
            tic = time.perf_counter()

        clipped = False
        for k in range(n_apply):
            if step_idx >= n_steps_total:
                break
            t_k = times[step_idx]
            if u_plan is not None:
                u_raw = u_plan[:, k]
            else:
                u_raw = planner.control(y_emb, target(t_k))
            u = model_true.clip_input(u_raw)
            clipped = clipped or bool(np.any(np.abs(u - u_raw) > 1e-12))
            assert model_true.contains_input(u)
            seg = integrate_ode(
                model_true, x, u, (t_k, t_k + dt_sub), integrate_dt, record_every=n_int
            )
            x = seg.states[:, -1]
            y_now = model_true.h(x)
            buffer.push(y_now)
            y_emb = buffer.embedded()
            u_rec[:, step_idx] = u
            z_rec[:, step_idx + 1] = C_ws @ y_now
            step_idx += 1
        if planner.kind != "scp":
            solve_times.append(time.perf_counter() - tic)
            iter_counts.append(0)
            flags.append({"clipped": clipped})
        else:
            flags[-1]["clipped"] = clipped

    metrics = tracking_metrics(times, z_rec, gamma_rec, spec.keep_outs, dt_sub)
    metrics["mean_solve_time"] = float(np.mean(solve_times))
    metrics["total_steps"] = int(n_steps_total)
    return MPCResult(
        label=getattr(planner, "label", planner.__class__.__name__),
        times=times,
        z=z_rec,
        gamma=gamma_rec,
        inputs=u_rec,
        solve_times=np.asarray(solve_times),
        scp_iterations=np.asarray(iter_counts),
        flags=flags,
        metrics=metrics,
    )


# ---------------------------------------------------------------------------
# metrics
# ---------------------------------------------------------------------------


def tracking_metrics(
    times: Array, z: Array, gamma: Array, keep_outs=(), dt: float | None = None
) -> dict:
    """ISE by trapezoid rule plus keep-out violation statistics."""
    err2 = np.sum((z - gamma) ** 2, axis=0)
    ise = float(np.trapezoid(err2, times))
    if keep_outs:
        pens = np.vstack([ko.penetration(z) for ko in keep_outs]).max(axis=0)
        ratio = float(np.count_nonzero(pens > 0) / pens.size)
        max_violation = float(pens.max())
    else:
        ratio, max_violation = 0.0, 0.0
    return {"ise": ise, "violation_ratio": ratio, "max_violation": max_violation}


def slowness_measure(target: TargetTrack, decay_samples: list) -> float:
    """Target mean speed over the mean decay speed of the unforced system."""
    if not decay_samples:
        raise ValidationError("slowness measure needs at least one decay sample")
    num = target.mean_speed()
    speeds = []
    for tr in decay_samples:
        dz = np.diff(tr.states, axis=1) / tr.dt
        speeds.append(float(np.mean(np.linalg.norm(dz, axis=0))))
    den = float(np.mean(speeds))
    if den <= 0.0:
        raise NumericalFailure("decays have zero mean speed")
    return num / den


def workspace_decay_samples(
    model: DynamicsModel,
    static_inputs,
    duration: float = 8.0,
    dt: float = 0.01,
    scale: float = 0.3,
    seed: int = 0,
) -> list:
    """Unforced workspace decays about each static input, for r_s estimates."""
    rng = np.random.default_rng(seed)
    C = model.workspace_map
    out = []
    for u in static_inputs:
        u = np.asarray(u, dtype=float)
        x_s = find_equilibrium(model, u)
        d0 = rng.standard_normal(model.n)
        x0 = x_s + scale * d0 / np.linalg.norm(d0)
        tr = integrate_ode(model, x0, u, (0.0, duration), 1e-3,
                           record_every=int(round(dt / 1e-3)))
        out.append(Trajectory(tr.times, C @ model.h(tr.states), None, "decay"))
    return out


def pareto_records(results: list) -> list:
    """One (label, mean solve time, ISE) row per closed-loop run."""
    return [
        {
            "label": res.label,
            "mean_solve_time": float(np.mean(res.solve_times)),
            "ise": res.metrics["ise"],
        }
        for res in results
    ]
