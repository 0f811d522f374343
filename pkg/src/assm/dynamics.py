"""Controlled-ODE simulators and steady-state / linearization utilities.

Models expose drift ``f(x)`` and control coupling ``g(x, u)`` separately so
that equilibrium finding, linearization and data collection can reason about
``f + g`` uniformly.  All model right-hand sides are vectorized over a
trailing batch axis: ``x`` may be ``(n,)`` or ``(n, m)`` and the result has
the same shape.  That keeps the fixed-step RK4 loop in pure numpy even when
integrating all training decays at once.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .errors import IntegrationDiverged, NoSteadyState, ValidationError

Array = np.ndarray


# ---------------------------------------------------------------------------
# trajectory container
# ---------------------------------------------------------------------------


@dataclass
class Trajectory:
    """Uniformly sampled trajectory of states or observables.

    Parameters
    ----------
    times:
        Sample instants, shape ``(n_t,)``, strictly increasing, uniform step.
    states:
        One column per sample, shape ``(dim, n_t)``.
    inputs:
        Optional aligned input record, shape ``(n_u, n_t)``.
    label:
        One of ``decay | controlled | closed-loop`` (free-form tolerated).
    """

    times: Array
    states: Array
    inputs: Array | None = None
    label: str = "decay"

    def __post_init__(self) -> None:
        self.times = np.asarray(self.times, dtype=float)
        self.states = np.asarray(self.states, dtype=float)
        if self.states.ndim != 2 or self.states.shape[1] != self.times.size:
            raise ValidationError(
                f"states {self.states.shape} misaligned with {self.times.size} samples"
            )
        if self.times.size >= 2:
            steps = np.diff(self.times)
            if np.any(steps <= 0):
                raise ValidationError("times must be strictly increasing")
            dt = steps[0]
            if np.max(np.abs(steps - dt)) > 1e-12 * max(1.0, abs(dt)):
                raise ValidationError("time step must be uniform to 1e-12 relative")
        if self.inputs is not None:
            self.inputs = np.asarray(self.inputs, dtype=float)
            if self.inputs.shape[1] != self.times.size:
                raise ValidationError("input record misaligned with samples")

    @property
    def dt(self) -> float:
        if self.times.size < 2:
            raise ValidationError("trajectory has fewer than two samples")
        return float(self.times[1] - self.times[0])

    @property
    def dim(self) -> int:
        return int(self.states.shape[0])

    @property
    def n_samples(self) -> int:
        return int(self.times.size)

    def tail(self, duration: float) -> "Trajectory":
        """Keep the final `duration` seconds (truncation to the settled part)."""
        t_cut = self.times[-1] - duration
        if t_cut < self.times[0] - 1e-12:
            raise ValidationError("truncation window longer than trajectory")
        keep = self.times >= t_cut - 1e-9 * max(1.0, abs(t_cut))
        return Trajectory(
            self.times[keep],
            self.states[:, keep],
            None if self.inputs is None else self.inputs[:, keep],
            self.label,
        )

    def map_states(self, fn) -> "Trajectory":
        return Trajectory(self.times, fn(self.states), self.inputs, self.label)


# ---------------------------------------------------------------------------
# model base
# ---------------------------------------------------------------------------


class DynamicsModel:
    """Abstract controlled ODE  ẋ = f(x) + g(x, u).

    Concrete subclasses define ``n``, ``n_u``, ``input_box`` (shape
    ``(n_u, 2)`` containing 0), the batched ``f`` and ``g``, an observable
    map ``h`` and a linear ``workspace_map`` matrix ``C`` taking the (delay
    embedded) observable to workspace coordinates.
    """

    n: int
    n_u: int
    input_box: Array  # (n_u, 2) columns [lo, hi]

    def f(self, x: Array) -> Array:  # pragma: no cover - interface
        raise NotImplementedError

    def g(self, x: Array, u: Array) -> Array:  # pragma: no cover - interface
        raise NotImplementedError

    def rhs(self, x: Array, u: Array) -> Array:
        return self.f(x) + self.g(x, u)

    # observable space defaults to full state
    @property
    def obs_dim(self) -> int:
        return self.n

    def h(self, x: Array) -> Array:
        """Observable map; identity unless a subclass overrides it."""
        return x

    def h_inv(self, y: Array) -> Array:
        """State from a single-copy observable; inverse of ``h``."""
        return y

    @property
    def workspace_map(self) -> Array:
        """Linear map C from (single-copy) observable space to workspace."""
        return np.eye(self.obs_dim)

    def contains_input(self, u: Array, atol: float = 1e-9) -> bool:
        u = np.asarray(u, dtype=float)
        return bool(
            np.all(u >= self.input_box[:, 0] - atol)
            and np.all(u <= self.input_box[:, 1] + atol)
        )

    def clip_input(self, u: Array) -> Array:
        return np.clip(u, self.input_box[:, 0], self.input_box[:, 1])


class LinearModel(DynamicsModel):
    """ẋ = A x + B u — test fixture and TPWL/Koopman oracle system."""

    def __init__(self, A: Array, B: Array, input_box: Array | None = None):
        self.A = np.asarray(A, dtype=float)
        self.B = np.asarray(B, dtype=float)
        self.n = self.A.shape[0]
        self.n_u = self.B.shape[1]
        if input_box is None:
            input_box = np.column_stack([-1e6 * np.ones(self.n_u), 1e6 * np.ones(self.n_u)])
        self.input_box = np.asarray(input_box, dtype=float)

    def f(self, x: Array) -> Array:
        return self.A @ x

    def g(self, x: Array, u: Array) -> Array:
        out = self.B @ u
        if x.ndim == 2 and out.ndim == 1:
            out = out[:, None] * np.ones((1, x.shape[1]))
        return out


# ---------------------------------------------------------------------------
# double pendulum
# ---------------------------------------------------------------------------


@dataclass
class DoublePendulumModel(DynamicsModel):
    """Planar double pendulum of two uniform rigid rods, torque controlled.

    State is ``x = (θ1, θ2, θ̇1, θ̇2)`` with absolute angles measured from the
    downward vertical.  The Euler–Lagrange equations for uniform rods of mass
    ``m_i`` and length ``L_i`` give

        M(θ) θ̈ + C(θ, θ̇) + G(θ) = Q + u,

        M = [[α, k cosΔ], [k cosΔ, β]],   Δ = θ1 − θ2,
        α = m1 L1²/3 + m2 L1²,  β = m2 L2²/3,  k = m2 L1 L2 / 2,
        C = (k sinΔ θ̇2², −k sinΔ θ̇1²),
        G = (g(m1/2 + m2) L1 sinθ1,  g m2 L2/2 sinθ2),

    with viscous joint torques ``Q = (−c1 θ̇1, −c2 θ̇2)`` folded into the
    drift and the control torque u applied per joint, so the coupling is
    ``g(x, u) = (0, 0, M(θ)⁻¹u)``.  The top rod is damped twice as hard
    (``c1 = 2 c2``).

    The observable is the canonical pair ``y = (θ, p)`` with generalized
    momenta ``p = M(θ)θ̇``: then ṗ = ∂L/∂θ − c∘θ̇ + u, so the observable's
    input sensitivity is exactly (0; I) and the reduced control matrix at
    any anchor is exactly Vᵀ(0; I).  Torque control also decouples the
    static balance per joint (u_eq = (g1 sinθ1, g2 sinθ2)), so the critical
    manifold covers the whole input box.

    The derivation is validated in the test suite by checking exact energy
    conservation with damping off and monotone dissipation with damping on.
    """

    L1: float = 1.0
    L2: float = 1.0
    m1: float = 1.0
    m2: float = 1.0
    g_acc: float = 9.8
    c1: float = 2.0
    c2: float = 1.0
    u1_max: float = 6.0
    u2_max: float = 2.6

    n: int = field(init=False, default=4, repr=False)
    n_u: int = field(init=False, default=2, repr=False)

    def __post_init__(self) -> None:
        self.input_box = np.array(
            [[-self.u1_max, self.u1_max], [-self.u2_max, self.u2_max]], dtype=float
        )
        # inertia/gravity constants of the uniform-rod Lagrangian
        self._alpha = self.m1 * self.L1**2 / 3.0 + self.m2 * self.L1**2
        self._beta = self.m2 * self.L2**2 / 3.0
        self._k = 0.5 * self.m2 * self.L1 * self.L2
        self._g1 = self.g_acc * (self.m1 / 2.0 + self.m2) * self.L1
        self._g2 = self.g_acc * self.m2 * self.L2 / 2.0

    def _solve_mass(self, t1, t2, b1, b2):
        """M(θ)⁻¹ b for the 2×2 mass matrix, batched and in closed form."""
        cd = np.cos(t1 - t2)
        det = self._alpha * self._beta - (self._k * cd) ** 2
        return (
            (self._beta * b1 - self._k * cd * b2) / det,
            (-self._k * cd * b1 + self._alpha * b2) / det,
        )

    def f(self, x: Array) -> Array:
        t1, t2, w1, w2 = x
        sd = np.sin(t1 - t2)
        rhs1 = -self._k * sd * w2**2 - self._g1 * np.sin(t1) - self.c1 * w1
        rhs2 = self._k * sd * w1**2 - self._g2 * np.sin(t2) - self.c2 * w2
        acc1, acc2 = self._solve_mass(t1, t2, rhs1, rhs2)
        return np.stack([w1, w2, acc1, acc2])

    def g(self, x: Array, u: Array) -> Array:
        t1, t2 = x[0], x[1]
        acc1, acc2 = self._solve_mass(t1, t2, u[0], u[1])
        out = np.zeros(x.shape)
        out[2] = acc1
        out[3] = acc2
        return out

    def h(self, x: Array) -> Array:
        """Canonical observable (θ1, θ2, p1, p2) with p = M(θ)θ̇."""
        t1, t2, w1, w2 = x
        kc = self._k * np.cos(t1 - t2)
        return np.stack(
            [t1, t2, self._alpha * w1 + kc * w2, kc * w1 + self._beta * w2]
        )

    def h_inv(self, y: Array) -> Array:
        t1, t2, p1, p2 = y
        w1, w2 = self._solve_mass(t1, t2, p1, p2)
        return np.stack([t1, t2, w1, w2])

    @property
    def workspace_map(self) -> Array:
        # workspace = joint angles (θ1, θ2)
        C = np.zeros((2, 4))
        C[0, 0] = 1.0
        C[1, 1] = 1.0
        return C

    def energy(self, x: Array) -> Array:
        """Mechanical energy, zero at the hanging rest state."""
        t1, t2, w1, w2 = x
        kinetic = 0.5 * (self._alpha * w1**2 + self._beta * w2**2) + self._k * np.cos(
            t1 - t2
        ) * w1 * w2
        potential = self._g1 * (1.0 - np.cos(t1)) + self._g2 * (1.0 - np.cos(t2))
        return kinetic + potential

    def gravity_balance_input(self, theta1: float, theta2: float) -> Array:
        """Constant torque holding (θ1, θ2, 0, 0) as an equilibrium."""
        return np.array(
            [self._g1 * np.sin(theta1), self._g2 * np.sin(theta2)]
        )


# ---------------------------------------------------------------------------
# N-link chain proxy
# ---------------------------------------------------------------------------


@dataclass
class ChainProxyModel(DynamicsModel):
    """Damped planar N-link chain with joint springs — soft-body stand-in.

    Uniform rods hang from a fixed base; rotational springs act on relative
    joint angles (rest shape straight down), viscous dampers on the relative
    rates.  Actuation applies torques at ``len(actuated_joints)`` designated
    joints through antagonistic channel pairs (two inputs per joint whose
    difference is the net torque), mimicking cable pairs.  The observable is
    the end-effector position; workspace equals the observable.
    """

    n_links: int = 4
    link_length: float = 0.25
    link_mass: float = 0.4
    joint_stiffness: float = 2.0
    joint_damping: float = 0.35
    g_acc: float = 9.8
    actuated_joints: tuple = (0, 2)
    torque_gain: float = 1.0
    u_max: float = 2.0

    def __post_init__(self) -> None:
        N = self.n_links
        self.n = 2 * N
        self.n_u = 2 * len(self.actuated_joints)
        self.input_box = np.array([[-self.u_max, self.u_max]] * self.n_u, dtype=float)
        m, L = self.link_mass, self.link_length
        tail = m * (N - 1 - np.arange(N))  # mass hanging below link i
        # pairwise inertia couplings c_ij = (m/2 + tail_max(i,j)) L², c_ii = (m/3 + tail_i) L²
        self._cpair = np.zeros((N, N))
        for i in range(N):
            for j in range(N):
                if i == j:
                    self._cpair[i, j] = (m / 3.0 + tail[j]) * L**2
                else:
                    k = max(i, j)
                    self._cpair[i, j] = (m / 2.0 + tail[k]) * L**2
        self._grav = self.g_acc * (m / 2.0 + tail) * L
        # map joint torques (relative coordinates) to absolute generalized forces
        D = np.zeros((N, N))  # φ = D θ, φ_i = θ_i − θ_{i−1}
        for i in range(N):
            D[i, i] = 1.0
            if i > 0:
                D[i, i - 1] = -1.0
        self._rel = D
        sel = np.zeros((N, len(self.actuated_joints)))
        for c, j in enumerate(self.actuated_joints):
            sel[j, c] = 1.0
        # generalized force from relative joint torque τ: Q = Dᵀ τ_joint
        self._act = self._rel.T @ sel * self.torque_gain

    def _mass_matrix(self, theta: Array) -> Array:
        # theta: (N,) or (N, m); returns (..., N, N)
        diff = theta[:, None, ...] - theta[None, :, ...]  # θ_i − θ_j
        M = self._cpair[(...,) + (None,) * (theta.ndim - 1)] * np.cos(diff)
        return np.moveaxis(M, (0, 1), (-2, -1))

    def f(self, x: Array) -> Array:
        N = self.n_links
        theta, omega = x[:N], x[N:]
        diff = theta[:, None, ...] - theta[None, :, ...]
        sin_d = np.sin(diff)
        cor = np.einsum(
            "ij,ij...,j...->i...", self._cpair, sin_d, omega**2
        )  # Coriolis/centrifugal column
        phi = np.tensordot(self._rel, theta, axes=(1, 0))
        phidot = np.tensordot(self._rel, omega, axes=(1, 0))
        spring = np.tensordot(self._rel.T, self.joint_stiffness * phi, axes=(1, 0))
        damp = np.tensordot(self._rel.T, self.joint_damping * phidot, axes=(1, 0))
        grav = self._grav[(...,) + (None,) * (theta.ndim - 1)] * np.sin(theta)
        rhs = -cor - grav - spring - damp
        M = self._mass_matrix(theta)
        if x.ndim == 1:
            acc = np.linalg.solve(M, rhs)
        else:
            acc = np.linalg.solve(M, np.moveaxis(rhs, 0, -1)[..., None])[..., 0]
            acc = np.moveaxis(acc, -1, 0)
        return np.concatenate([omega, acc])

    def g(self, x: Array, u: Array) -> Array:
        N = self.n_links
        theta = x[:N]
        # antagonistic pairs: net joint torque = u_even − u_odd
        tau = u[0::2] - u[1::2]
        force = np.tensordot(self._act, tau, axes=(1, 0))
        M = self._mass_matrix(theta)
        if x.ndim == 1:
            acc = np.linalg.solve(M, force)
        else:
            acc = np.linalg.solve(M, np.moveaxis(force, 0, -1)[..., None])[..., 0]
            acc = np.moveaxis(acc, -1, 0)
        out = np.zeros_like(x, dtype=float)
        out[N:] = acc
        return out

    @property
    def obs_dim(self) -> int:
        return 2

    def h(self, x: Array) -> Array:
        """End-effector position (horizontal, vertical) relative to the base."""
        N = self.n_links
        theta = x[:N]
        return np.stack(
            [
                self.link_length * np.sin(theta).sum(axis=0),
                -self.link_length * np.cos(theta).sum(axis=0),
            ]
        )

    def energy(self, x: Array) -> Array:
        N = self.n_links
        theta, omega = x[:N], x[N:]
        M = self._mass_matrix(theta)
        if x.ndim == 1:
            kin = 0.5 * omega @ M @ omega
        else:
            om = np.moveaxis(omega, 0, -1)
            kin = 0.5 * np.einsum("...i,...ij,...j->...", om, M, om)
        grav = (self._grav[(...,) + (None,) * (theta.ndim - 1)] * (1 - np.cos(theta))).sum(
            axis=0
        )
        phi = np.tensordot(self._rel, theta, axes=(1, 0))
        spring = 0.5 * self.joint_stiffness * (phi**2).sum(axis=0)
        return kin + grav + spring


# ---------------------------------------------------------------------------
# integration
# ---------------------------------------------------------------------------


def _as_input_fn(input_signal, n_u: int):
    if input_signal is None:
        u0 = np.zeros(n_u)
        return lambda t: u0
    if isinstance(input_signal, np.ndarray) or np.isscalar(input_signal):
        u0 = np.broadcast_to(np.asarray(input_signal, dtype=float), (n_u,)).copy()
        return lambda t: u0
    return input_signal


def integrate_ode(
    model: DynamicsModel,
    x0: Array,
    input_signal,
    t_span: tuple,
    dt: float = 1e-3,
    record_every: int = 1,
    label: str = "controlled",
) -> Trajectory:
    """Fixed-step classical RK4 integration of ẋ = f(x) + g(x, u(t)).

    Parameters
    ----------
    input_signal:
        ``None`` (zero input), a constant vector, or a callable ``t → u``.
    record_every:
        Keep every k-th step in the returned trajectory (the integration
        itself always advances by ``dt``).

    Raises
    ------
    IntegrationDiverged
        If the state leaves the finite range; carries the last valid time.
    """
    if dt <= 0:
        raise ValidationError("dt must be positive")
    t0, tf = float(t_span[0]), float(t_span[1])
    n_steps = int(round((tf - t0) / dt))
    u_fn = _as_input_fn(input_signal, model.n_u)
    x = np.asarray(x0, dtype=float).copy()
    if not np.all(np.isfinite(x)):
        raise ValidationError("x0 must be finite")

    n_rec = n_steps // record_every + 1
    times = t0 + dt * record_every * np.arange(n_rec)
    states = np.empty((model.n, n_rec))
    inputs = np.empty((model.n_u, n_rec))
    states[:, 0] = x
    inputs[:, 0] = u_fn(t0)

    rhs = model.rhs
    for k in range(1, n_steps + 1):
        t = t0 + (k - 1) * dt
        u1 = np.asarray(u_fn(t), dtype=float)
        u2 = np.asarray(u_fn(t + 0.5 * dt), dtype=float)
        u3 = np.asarray(u_fn(t + dt), dtype=float)
        k1 = rhs(x, u1)
        k2 = rhs(x + 0.5 * dt * k1, u2)
        k3 = rhs(x + 0.5 * dt * k2, u2)
        k4 = rhs(x + dt * k3, u3)
        x = x + (dt / 6.0) * (k1 + 2 * k2 + 2 * k3 + k4)
        if not np.all(np.isfinite(x)) or np.max(np.abs(x)) > 1e9:
            raise IntegrationDiverged(t)
        if k % record_every == 0:
            idx = k // record_every
            states[:, idx] = x
            inputs[:, idx] = u3
    return Trajectory(times, states, inputs, label)


def integrate_batch(
    model: DynamicsModel,
    X0: Array,
    U_const: Array,
    t_span: tuple,
    dt: float = 1e-3,
    record_every: int = 10,
) -> Array:
    """Integrate many constant-input trajectories at once.

    ``X0`` is ``(n, m)`` (one column per trajectory), ``U_const`` is
    ``(n_u, m)``.  Returns recorded states of shape ``(n, m, n_rec)``.
    Vectorizing the RK4 stages across the batch is what keeps whole-grid
    data collection near-interactive.
    """
    t0, tf = float(t_span[0]), float(t_span[1])
    n_steps = int(round((tf - t0) / dt))
    X = np.asarray(X0, dtype=float).copy()
    U = np.asarray(U_const, dtype=float)
    n_rec = n_steps // record_every + 1
    out = np.empty((X.shape[0], X.shape[1], n_rec))
    out[:, :, 0] = X
    rhs = model.rhs
    for k in range(1, n_steps + 1):
        k1 = rhs(X, U)
        k2 = rhs(X + 0.5 * dt * k1, U)
        k3 = rhs(X + 0.5 * dt * k2, U)
        k4 = rhs(X + dt * k3, U)
        X = X + (dt / 6.0) * (k1 + 2 * k2 + 2 * k3 + k4)
        if k % record_every == 0:
            if not np.all(np.isfinite(X)):
                raise IntegrationDiverged(t0 + k * dt)
            out[:, :, k // record_every] = X
    return out


# ---------------------------------------------------------------------------
# equilibria and linearization
# ---------------------------------------------------------------------------


def _fd_jacobian(fn, x: Array, scale: float = 1e-6) -> Array:
    """Central finite-difference Jacobian with per-component step."""
    x = np.asarray(x, dtype=float)
    f0 = np.asarray(fn(x))
    J = np.empty((f0.size, x.size))
    for i in range(x.size):
        h = scale * (1.0 + abs(x[i]))
        xp = x.copy()
        xm = x.copy()
        xp[i] += h
        xm[i] -= h
        J[:, i] = (np.asarray(fn(xp)) - np.asarray(fn(xm))) / (2 * h)
    return J


def find_equilibrium(
    model: DynamicsModel,
    u_const: Array,
    x_guess: Array | None = None,
    tol: float = 1e-10,
    max_newton: int = 60,
) -> Array:
    """Solve f(x) + g(x, u) = 0 for x by damped Newton iteration.

    Falls back to long-horizon integration (until ‖ẋ‖ ≤ 1e-9) followed by a
    Newton polish when the iteration stalls.

    Raises
    ------
    ValidationError
        If ``u_const`` lies outside the model's input box.
    NoSteadyState
        If neither method converges within budget.
    """
    u = np.asarray(u_const, dtype=float)
    if not model.contains_input(u):
        raise ValidationError("u_const outside input_box")
    x = np.zeros(model.n) if x_guess is None else np.asarray(x_guess, dtype=float).copy()

    def residual(xx):
        return model.rhs(xx, u)

    def newton(x):
        for _ in range(max_newton):
            r = residual(x)
            nr = np.linalg.norm(r)
            if nr <= tol:
                return x
            J = _fd_jacobian(residual, x)
            try:
                step = np.linalg.solve(J, -r)
            except np.linalg.LinAlgError:
                return None
            lam = 1.0
            for _ in range(30):
                x_new = x + lam * step
                if np.linalg.norm(residual(x_new)) < nr:
                    break
                lam *= 0.5
            else:
                return None
            x = x_new
        return x if np.linalg.norm(residual(x)) <= tol else None

    sol = newton(x.copy())
    if sol is None:
        # relaxation fallback: ride the flow toward the attractor, then polish
        x_relax = x.copy()
        for _ in range(40):
            traj = integrate_ode(model, x_relax, u, (0.0, 50.0), dt=1e-3, record_every=1000)
            x_relax = traj.states[:, -1]
            if np.linalg.norm(residual(x_relax)) <= 1e-9:
                break
        sol = newton(x_relax)
        if sol is None:
            raise NoSteadyState(f"no equilibrium found for u = {u}")
    return sol


@dataclass(frozen=True)
class Linearization:
    """Jacobians at a point plus the eigenstructure needed for gap checks."""

    A: Array
    B_full: Array
    eigvals: Array  # sorted by descending real part

    def gap_ratio(self, d: int) -> float:
        """Re(λ_{d+1}) / Re(λ_d); > 1 means a strict spectral split after d."""
        return float(self.eigvals[d].real / self.eigvals[d - 1].real)

    def slow_subspace(self, d: int) -> Array:
        """Orthonormal basis of the real invariant subspace of the d slowest modes."""
        w, vecs = np.linalg.eig(self.A)
        order = np.argsort(-w.real)
        cols = []
        seen = 0
        i = 0
        while seen < d:
            v = vecs[:, order[i]]
            if abs(w[order[i]].imag) > 1e-12:
                cols.extend([v.real, v.imag])
                seen += 2
                i += 2  # skip the conjugate
            else:
                cols.append(v.real)
                seen += 1
                i += 1
        Q, _ = np.linalg.qr(np.column_stack(cols)[:, :d])
        return Q


def linearize_at(model: DynamicsModel, x: Array, u: Array) -> Linearization:
    """Central finite-difference linearization of f + g at (x, u).

    Step per component is ``1e-6·(1 + |component|)``.  Eigenvalues of A are
    returned sorted by descending real part so that ``eigvals[:d]`` are the
    d slowest (least-damped) modes.
    """
    x = np.asarray(x, dtype=float)
    u = np.asarray(u, dtype=float)
    if not (np.all(np.isfinite(x)) and np.all(np.isfinite(u))):
        raise ValidationError("linearization point must be finite")
    A = _fd_jacobian(lambda xx: model.rhs(xx, u), x)
    B = _fd_jacobian(lambda uu: model.rhs(x, uu), u)
    w = np.linalg.eigvals(A)
    w = w[np.argsort(-w.real)]
    return Linearization(A=A, B_full=B, eigvals=w)


def pendulum_grid(half_width: float = math.pi / 9.0, points_per_side: int = 6) -> Array:
    """The (θ1, θ2) training grid: a points² lattice on the centered square."""
    qs = np.linspace(-half_width, half_width, points_per_side)
    t1, t2 = np.meshgrid(qs, qs, indexing="ij")
    return np.column_stack([t1.ravel(), t2.ravel()])
