"""Linear baselines for closed-loop comparison.

Two methods: trajectory piecewise-linear reduction (TPWL) — an SVD basis
carrying a bank of local linearizations with error-triggered spawning —
and the Koopman static-pregain controller, an LQR on a globally fitted
linear observable model plus a static feedforward map.  Both plan and act
through the same closed-loop runner and metrics as the dictionary models,
so their ISE numbers are directly comparable.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
import scipy.linalg

from .dynamics import (
    DynamicsModel,
    Trajectory,
    find_equilibrium,
    integrate_ode,
    linearize_at,
)
from .embedding import EmbeddingSpec, finite_difference
from .errors import NumericalFailure, StabilityViolation, ValidationError
from .mpc import DiscreteReducedModel
from .signals import sample_lhs, zoh_signal

Array = np.ndarray


# ---------------------------------------------------------------------------
# trajectory piecewise-linear reduction
# ---------------------------------------------------------------------------


def _affine_rk4(A: Array, B: Array, c: Array, r: Array, u: Array, dt: float) -> Array:
    b = B @ u + c
    k1 = A @ r + b
    k2 = A @ (r + 0.5 * dt * k1) + b
    k3 = A @ (r + 0.5 * dt * k2) + b
    k4 = A @ (r + dt * k3) + b
    return r + (dt / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)


@dataclass
class TPWLModel:
    """SVD basis plus a bank of anchored affine reduced models.

    Each local model is the full-model Jacobian at its anchor, Galerkin
    projected: ṙ = A_i r + B_i u + c_i with c_i absorbing the anchor's
    drift.  Runtime selection is hard nearest-anchor switching in reduced
    coordinates; the bank is grown during training whenever the reduced
    prediction drifts past the relative-error threshold.
    """

    basis: Array  # (n, k), orthonormal columns
    anchors: Array  # (n_models, n) linearization points
    anchor_inputs: Array  # (n_models, n_u)
    A: Array  # (n_models, k, k)
    B: Array  # (n_models, k, n_u)
    c: Array  # (n_models, k)
    threshold: float = 0.10
    anchors_red: Array = field(init=False, repr=False)

    def __post_init__(self) -> None:
        self.basis = np.asarray(self.basis, dtype=float)
        gram = self.basis.T @ self.basis
        if not np.allclose(gram, np.eye(self.basis.shape[1]), atol=1e-8):
            raise ValidationError("TPWL basis is not orthonormal")
        if self.anchors.shape[0] < 1:
            raise ValidationError("TPWL bank needs at least one local model")
        self.anchors_red = self.anchors @ self.basis

    @property
    def k(self) -> int:
        return int(self.basis.shape[1])

    @property
    def n_u(self) -> int:
        return int(self.B.shape[2])

    @property
    def n_models(self) -> int:
        return int(self.anchors.shape[0])

    def select(self, r: Array) -> int:
        """Index of the nearest anchor in reduced coordinates."""
        return int(
            np.argmin(np.linalg.norm(self.anchors_red - r[None, :], axis=1))
        )

    def rhs(self, r: Array, u: Array) -> Array:
        i = self.select(r)
        return self.A[i] @ r + self.B[i] @ u + self.c[i]


def tpwl_step(model: TPWLModel, x_red: Array, u: Array, dt: float) -> Array:
    """One RK4 step of the nearest-anchor affine model (selection frozen)."""
    r = np.asarray(x_red, dtype=float)
    i = model.select(r)
    return _affine_rk4(model.A[i], model.B[i], model.c[i], r, np.asarray(u, dtype=float), dt)


def tpwl_train(
    model: DynamicsModel,
    input_signals,
    duration: float,
    dt: float = 0.01,
    k: int | None = None,
    threshold: float = 0.10,
    x0: Array | None = None,
    integrate_dt: float = 1e-3,
) -> TPWLModel:
    """Train the piecewise bank from controlled input sweeps.

    Each response is scanned alongside the incumbent reduced prediction
    (nearest-anchor stepping); whenever the pointwise relative state error
    — positions and velocities together — exceeds `threshold`, a new local
    model is spawned at the true state and the prediction re-seeded there.
    The relative error is floored at 1% of the trajectory's peak norm so a
    pass through the origin cannot trigger spuriously.
    """
    signals = list(input_signals)
    if not signals:
        raise ValidationError("no training inputs for the piecewise bank")
    if x0 is None:
        x0 = find_equilibrium(model, np.zeros(model.n_u))
    rec = int(round(dt / integrate_dt))
    if abs(rec * integrate_dt - dt) > 1e-12:
        raise ValidationError("dt must be an integer multiple of integrate_dt")
    trajs = [
        integrate_ode(model, x0, sig, (0.0, duration), dt=integrate_dt, record_every=rec)
        for sig in signals
    ]
    snapshots = np.hstack([tr.states for tr in trajs])
    if k is None:
        k = model.n
    left, _, _ = np.linalg.svd(snapshots, full_matrices=False)
    basis = left[:, :k]

    anchors: list[Array] = []
    anchor_inputs: list[Array] = []
    A_loc: list[Array] = []
    B_loc: list[Array] = []
    c_loc: list[Array] = []

    def spawn(x_a: Array, u_a: Array) -> None:
        lin = linearize_at(model, x_a, u_a)
        r_a = basis.T @ x_a
        A_r = basis.T @ lin.A @ basis
        B_r = basis.T @ lin.B_full
        c_r = basis.T @ model.rhs(x_a, u_a) - A_r @ r_a - B_r @ u_a
        anchors.append(np.asarray(x_a, dtype=float).copy())
        anchor_inputs.append(np.asarray(u_a, dtype=float).copy())
        A_loc.append(A_r)
        B_loc.append(B_r)
        c_loc.append(c_r)

    for tr in trajs:
        if tr.inputs is None:
            raise ValidationError("training trajectories must carry inputs")
        floor = 1e-2 * max(float(np.linalg.norm(tr.states, axis=0).max()), 1e-12)
        if not anchors:
            spawn(tr.states[:, 0], tr.inputs[:, 0])
        r = basis.T @ tr.states[:, 0]
        red_anchors = np.array([basis.T @ a for a in anchors])
        for s in range(1, tr.n_samples):
            i = int(np.argmin(np.linalg.norm(red_anchors - r[None, :], axis=1)))
            r = _affine_rk4(A_loc[i], B_loc[i], c_loc[i], r, tr.inputs[:, s - 1], dt)
            x_true = tr.states[:, s]
            err = np.linalg.norm(basis @ r - x_true) / max(
                np.linalg.norm(x_true), floor
            )
            if err > threshold:
                spawn(x_true, tr.inputs[:, s])
                red_anchors = np.array([basis.T @ a for a in anchors])
                r = basis.T @ x_true
    return TPWLModel(
        basis,
        np.array(anchors),
        np.array(anchor_inputs),
        np.array(A_loc),
        np.array(B_loc),
        np.array(c_loc),
        threshold,
    )


def random_step_inputs(
    model: DynamicsModel,
    count: int = 5,
    duration: float = 20.0,
    hold: float = 1.0,
    scale: float = 0.8,
    seed: int = 0,
):
    """LHS-sampled random step sequences spanning the (scaled) input box."""
    n_holds = int(math.ceil(duration / hold))
    box = np.vstack([model.input_box * scale] * n_holds)
    draws = sample_lhs(seed, count, box)
    return [
        zoh_signal(draws[i].reshape(n_holds, model.n_u).T, hold) for i in range(count)
    ]


class TPWLPlanModel(DiscreteReducedModel):
    """Horizon-planning wrapper: TPWL state dynamics + true observable output."""

    def __init__(self, tpwl: TPWLModel, model_true: DynamicsModel, dt_sub: float):
        super().__init__(tpwl.rhs, tpwl.k, tpwl.n_u, dt_sub)
        self.tpwl = tpwl
        self.model_true = model_true
        self.C = np.asarray(model_true.workspace_map, dtype=float)

    def step(self, r: Array, u: Array) -> Array:
        return tpwl_step(self.tpwl, r, u, self.dt_sub)

    def output(self, r: Array) -> Array:
        return self.C @ self.model_true.h(self.tpwl.basis @ r)

    def output_jacobian(self, r: Array) -> Array:
        w = self.C.shape[0]
        J = np.empty((w, self.d))
        for i in range(self.d):
            h = 1e-6 * (1.0 + abs(r[i]))
            e = np.zeros(self.d)
            e[i] = h
            J[:, i] = (self.output(r + e) - self.output(r - e)) / (2.0 * h)
        return J


class TPWLPlanner:
    """Plans through the shared SCP machinery with zero feedforward."""

    kind = "scp"

    def __init__(self, tpwl: TPWLModel, model_true: DynamicsModel, label: str = "tpwl"):
        self.tpwl = tpwl
        self.model_true = model_true
        self.label = label

    def local_model(self, y_emb: Array, dt_sub: float):
        y_now = y_emb[-self.model_true.obs_dim :]
        x_now = self.model_true.h_inv(y_now)
        r0 = self.tpwl.basis.T @ x_now
        plan = TPWLPlanModel(self.tpwl, self.model_true, dt_sub)
        return plan, r0, np.zeros(self.tpwl.n_u), {}


# ---------------------------------------------------------------------------
# Koopman static pregain
# ---------------------------------------------------------------------------


def solve_care(A: Array, B: Array, Q: Array, R: Array, max_iter: int = 100):
    """Continuous algebraic Riccati equation by the sign-function iteration.

    Each determinant-scaled Newton sweep Z ← (μZ + (μZ)⁻¹)/2 doubles the
    correct digits of sign(H); the stable invariant subspace of the
    Hamiltonian then yields P.  Returns (P, relative residual).
    """
    A = np.asarray(A, dtype=float)
    B = np.asarray(B, dtype=float)
    Q = np.asarray(Q, dtype=float)
    R = np.asarray(R, dtype=float)
    n = A.shape[0]
    G = B @ np.linalg.solve(R, B.T)
    H = np.block([[A, -G], [-Q, -A.T]])
    Z = H.copy()
    for _ in range(max_iter):
        det = np.linalg.det(Z)
        if det == 0.0 or not np.isfinite(det):
            raise NumericalFailure("Hamiltonian sign iteration became singular")
        mu = abs(det) ** (-1.0 / (2 * n))
        Z_next = 0.5 * (mu * Z + np.linalg.inv(mu * Z))
        drift = np.linalg.norm(Z_next - Z, "fro")
        Z = Z_next
        if drift <= 1e-14 * np.linalg.norm(Z, "fro"):
            break
    # columns spanning range((I - sign(H))/2) = the stable subspace
    proj = 0.5 * (np.eye(2 * n) - Z)
    Qb, _, _ = scipy.linalg.qr(proj, pivoting=True)
    U1, U2 = Qb[:n, :n], Qb[n:, :n]
    P = U2 @ np.linalg.inv(U1)
    P = 0.5 * (P + P.T)
    res = A.T @ P + P @ A - P @ G @ P + Q
    scale = (
        np.linalg.norm(Q, "fro")
        + 2.0 * np.linalg.norm(A.T @ P, "fro")
        + np.linalg.norm(P @ G @ P, "fro")
    )
    return P, float(np.linalg.norm(res, "fro") / max(scale, 1e-300))


@dataclass
class KoopmanPregainModel:
    """Fitted linear observable dynamics, static operator, and LQR pregain."""

    A: Array  # (n_y, n_y) dynamic operator
    B: Array  # (n_y, n_u)
    G: Array  # (n_u, w) static operator, ū = G z_s
    K: Array  # (n_u, n_y) pregain
    P: Array  # Riccati solution behind K
    Q_k: Array
    R_k: Array
    target_map: Array  # (n_y, w) image of a workspace target in observable space
    care_residual: float
    open_loop_stable: bool
    embedding: EmbeddingSpec | None = None

    def __post_init__(self) -> None:
        closed = self.A - self.B @ self.K
        if np.any(np.linalg.eigvals(closed).real >= 0):
            raise StabilityViolation("pregain does not stabilize the fitted dynamics")


def koopman_fit(
    Y: Array,
    Yd: Array,
    U: Array,
    static_outputs: Array,
    static_inputs: Array,
    Q_k: Array | None = None,
    R_k: Array | None = None,
    target_map: Array | None = None,
    embedding: EmbeddingSpec | None = None,
) -> KoopmanPregainModel:
    """Two closed-form LS fits plus the Riccati pregain.

    {A★, B★} minimizes ‖Ẏ − AY − BU‖² over the controlled snapshots;
    G maps steady workspace outputs to the inputs that hold them.  The
    open-loop stability of A★ is reported, the closed-loop stability of
    A★ − B★K is required.
    """
    Y = np.asarray(Y, dtype=float)
    Yd = np.asarray(Yd, dtype=float)
    U = np.atleast_2d(np.asarray(U, dtype=float))
    n_y, n_u = Y.shape[0], U.shape[0]
    if Yd.shape != Y.shape or U.shape[1] != Y.shape[1]:
        raise ValidationError("snapshot matrices are misaligned")
    if np.linalg.matrix_rank(U) < n_u:
        raise NumericalFailure("input snapshots are rank deficient")
    theta = np.vstack([Y, U])
    if np.linalg.matrix_rank(theta) < n_y + n_u:
        raise NumericalFailure("controlled snapshots are rank deficient for the LS fit")
    coeff, *_ = np.linalg.lstsq(theta.T, Yd.T, rcond=None)
    A_star = coeff[:n_y].T
    B_star = coeff[n_y:].T

    Z_s = np.atleast_2d(np.asarray(static_outputs, dtype=float))
    U_bar = np.atleast_2d(np.asarray(static_inputs, dtype=float))
    w = Z_s.shape[0]
    if Z_s.shape[1] < w:
        raise ValidationError("need at least as many static pairs as workspace dims")
    if U_bar.shape[1] != Z_s.shape[1]:
        raise ValidationError("static pair arrays are misaligned")
    G_coeff, *_ = np.linalg.lstsq(Z_s.T, U_bar.T, rcond=None)
    G = G_coeff.T

    Q_k = np.eye(n_y) if Q_k is None else np.asarray(Q_k, dtype=float)
    R_k = 0.001 * np.eye(n_u) if R_k is None else np.asarray(R_k, dtype=float)
    P, residual = solve_care(A_star, B_star, Q_k, R_k)
    if residual > 1e-9:
        raise NumericalFailure(f"Riccati residual {residual:.2e} exceeds 1e-9")
    K = np.linalg.solve(R_k, B_star.T @ P)

    if target_map is None:
        if w != n_y:
            raise ValidationError(
                "target_map is required when observable and workspace dims differ"
            )
        target_map = np.eye(n_y)
    open_loop_stable = bool(np.all(np.linalg.eigvals(A_star).real < 0))
    return KoopmanPregainModel(
        A_star,
        B_star,
        G,
        K,
        P,
        Q_k,
        R_k,
        np.asarray(target_map, dtype=float),
        residual,
        open_loop_stable,
        embedding,
    )


def koopman_pregain_control(
    model: KoopmanPregainModel,
    z_obs: Array,
    gamma_t: Array,
    input_box: Array | None = None,
):
    """u = −K(y − Λ Γ) + G Γ, optionally clipped to the box with an event flag."""
    gamma_t = np.asarray(gamma_t, dtype=float)
    u = -model.K @ (np.asarray(z_obs, dtype=float) - model.target_map @ gamma_t)
    u = u + model.G @ gamma_t
    if input_box is None:
        return u, False
    clipped = np.clip(u, input_box[:, 0], input_box[:, 1])
    return clipped, bool(np.any(clipped != u))


class KoopmanPlanner:
    """Static feedback law run through the shared closed-loop loop."""

    kind = "static"

    def __init__(self, model: KoopmanPregainModel, label: str = "koopman"):
        self.model = model
        self.label = label

    def control(self, y_emb: Array, gamma_t: Array) -> Array:
        u, _ = koopman_pregain_control(self.model, y_emb, gamma_t)
        return u


def koopman_training_data(
    model: DynamicsModel,
    static_inputs,
    hold: float = 6.0,
    dt: float = 0.01,
    integrate_dt: float = 1e-3,
    trim: int = 2,
):
    """Observable snapshots from a step sweep through the static inputs.

    One long run holds each static input in turn (step concatenation);
    samples within `trim` records of a step edge are dropped so the
    finite-difference derivatives never straddle an input jump.  Returns
    (Y, Ẏ, U, Z_s, Ū) with the static pairs taken at the exact equilibria.
    """
    inputs = [np.asarray(u, dtype=float) for u in static_inputs]
    if not inputs:
        raise ValidationError("no static inputs for the step sweep")
    table = np.column_stack(inputs)
    rec = int(round(dt / integrate_dt))
    if abs(rec * integrate_dt - dt) > 1e-12:
        raise ValidationError("dt must be an integer multiple of integrate_dt")
    duration = hold * len(inputs)
    x0 = find_equilibrium(model, np.zeros(model.n_u))
    tr = integrate_ode(
        model, x0, zoh_signal(table, hold), (0.0, duration), dt=integrate_dt, record_every=rec
    )
    obs = Trajectory(tr.times, model.h(tr.states), tr.inputs, "controlled")
    deriv = finite_difference(obs)

    keep = np.ones(tr.n_samples, dtype=bool)
    per = hold / dt
    for edge in range(1, len(inputs)):
        b = int(round(edge * per))
        lo, hi = max(b - trim, 0), min(b + trim, tr.n_samples - 1)
        keep[lo : hi + 1] = False

    C = np.asarray(model.workspace_map, dtype=float)
    Z_s = np.column_stack([C @ model.h(find_equilibrium(model, u)) for u in inputs])
    U_bar = table
    return obs.states[:, keep], deriv.states[:, keep], tr.inputs[:, keep], Z_s, U_bar
