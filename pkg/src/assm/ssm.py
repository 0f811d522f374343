"""Fitting one static SSM: tangent space, polynomial maps, control matrix.

Conventions shared by every fit
-------------------------------
* Monomials of the reduced coordinate r ∈ R^d are enumerated in graded
  lexicographic order (total degree, then lexicographic by exponent of the
  first variables); the basis of orders 1..n has m_n = C(d+n, d) − 1 entries.
* Snapshot matrices hold one sample per column and are centered about the
  model's anchor before they reach this module.
* Least squares is solved by orthogonal factorization (numpy lstsq) with the
  regressor condition number monitored; no regularization by default.
"""

from __future__ import annotations

import itertools
import warnings
from dataclasses import dataclass, field, replace
from functools import lru_cache

import numpy as np

from .dynamics import Trajectory
from .embedding import finite_difference, nmte
from .errors import (
    ConditioningError,
    ModelDomainExceeded,
    NumericalFailure,
    StabilityViolation,
    UnidentifiableChannels,
    ValidationError,
)

Array = np.ndarray

MONOMIAL_ORDER_TAG = "graded-lex"
CONDITION_LIMIT = 1e10


@lru_cache(maxsize=None)
def monomial_exponents(d: int, n: int, include_constant: bool = False):
    """Exponent table of all monomials of total degree 1..n (graded-lex)."""
    rows = []
    degrees = range(0, n + 1) if include_constant else range(1, n + 1)
    for k in degrees:
        for combo in itertools.combinations_with_replacement(range(d), k):
            e = np.zeros(d, dtype=int)
            for idx in combo:
                e[idx] += 1
            rows.append(e)
    return np.array(rows, dtype=int).reshape(len(rows), d)


def monomial_count(d: int, n: int) -> int:
    from math import comb

    return comb(d + n, d) - 1


def monomial_basis(r: Array, n: int, include_constant: bool = False) -> Array:
    """Evaluate the monomial feature vector at r, shape (d,) or (d, N)."""
    r = np.asarray(r, dtype=float)
    E = monomial_exponents(r.shape[0], n, include_constant)
    if r.ndim == 1:
        return np.prod(r[None, :] ** E, axis=1)
    return np.prod(r.T[:, None, :] ** E[None, :, :], axis=2).T


def monomial_jacobian(r: Array, n: int) -> Array:
    """∂(monomials)/∂r at a single point r, shape (m_n, d)."""
    r = np.asarray(r, dtype=float)
    d = r.shape[0]
    E = monomial_exponents(d, n)
    J = np.zeros((E.shape[0], d))
    for j in range(d):
        Ej = E.copy()
        coef = E[:, j].astype(float)
        Ej[:, j] = np.maximum(E[:, j] - 1, 0)
        J[:, j] = coef * np.prod(r[None, :] ** Ej, axis=1)
    return J


# ---------------------------------------------------------------------------
# model container
# ---------------------------------------------------------------------------


@dataclass
class StaticSSMModel:
    """One fixed-input SSM: chart r = Vᵀ(y − y_s), lift y = W·mono(r) + y_s.

    ``R`` holds the reduced-dynamics coefficients (ṙ = R·mono(r) + B·u_d for
    deviations u_d about the static input u_s).
    """

    y_s: Array
    u_s: Array
    V: Array  # (embedded_dim, d), orthonormal columns
    W: Array  # (embedded_dim, m_{n_w})
    R: Array  # (d, m_{n_r})
    B: Array | None
    d: int
    n_w: int
    n_r: int
    monomial_order: str = MONOMIAL_ORDER_TAG

    @property
    def embedded_dim(self) -> int:
        return int(self.V.shape[0])

    @property
    def linear_part(self) -> Array:
        return self.R[:, : self.d]

    def chart(self, y: Array) -> Array:
        return self.V.T @ (y - (self.y_s if y.ndim == 1 else self.y_s[:, None]))

    def lift(self, r: Array) -> Array:
        out = self.W @ monomial_basis(r, self.n_w)
        return out + (self.y_s if out.ndim == 1 else self.y_s[:, None])

    def reduced_rhs(self, r: Array, u_d: Array | None = None) -> Array:
        out = self.R @ monomial_basis(r, self.n_r)
        if u_d is not None and self.B is not None:
            out = out + self.B @ u_d
        return out

    def validate(self, tangency_tol: float = 1e-3) -> None:
        if np.max(np.abs(self.V.T @ self.V - np.eye(self.d))) > 1e-12:
            raise ValidationError("tangent basis is not orthonormal")
        tang = np.linalg.norm(self.W[:, : self.d] - self.V) / max(
            1.0, np.linalg.norm(self.V)
        )
        if tang > tangency_tol:
            warnings.warn(f"parametrization linear block deviates from V by {tang:.2e}")
        lam = np.linalg.eigvals(self.linear_part)
        if np.any(lam.real >= 0):
            raise StabilityViolation(f"reduced linear part unstable: eigs {lam}")


# ---------------------------------------------------------------------------
# fits
# ---------------------------------------------------------------------------


def _lstsq_monitored(Phi_T: Array, targets: Array, what: str):
    """Least squares with condition monitoring; returns coefficientsᵀ."""
    coef, _, rank, svals = np.linalg.lstsq(Phi_T, targets, rcond=None)
    if svals.size and svals[-1] > 0:
        cond = float(svals[0] / svals[-1])
    else:
        cond = np.inf
    if cond > CONDITION_LIMIT:
        raise ConditioningError(
            f"{what}: regressor condition {cond:.2e} exceeds {CONDITION_LIMIT:.0e}; "
            "lower the polynomial order or collect richer data"
        )
    return coef, cond


@dataclass(frozen=True)
class TangentFit:
    V: Array
    singular_values: Array


def fit_tangent_space(centered_snapshots: Array, d: int) -> TangentFit:
    """Leading d left singular vectors of the centered snapshot matrix.

    The singular spectrum is returned so the caller can audit the choice of
    d (residual energy beyond the retained modes).  Column signs are fixed
    deterministically (largest-magnitude entry positive).
    """
    Y = np.asarray(centered_snapshots, dtype=float)
    U, s, _ = np.linalg.svd(Y, full_matrices=False)
    if s.size < d or s[d - 1] <= 1e-12 * s[0]:
        raise NumericalFailure(f"snapshot rank below requested dimension d={d}")
    V = U[:, :d].copy()
    for j in range(d):
        k = int(np.argmax(np.abs(V[:, j])))
        if V[k, j] < 0:
            V[:, j] = -V[:, j]
    return TangentFit(V=V, singular_values=s)


@dataclass(frozen=True)
class ParametrizationFit:
    W: Array
    train_error: float  # relative Frobenius reconstruction error
    condition: float


def fit_parametrization(centered_snapshots: Array, V: Array, n_w: int) -> ParametrizationFit:
    """LS fit of the polynomial lift y ≈ W·mono(Vᵀy)."""
    Y = np.asarray(centered_snapshots, dtype=float)
    m = monomial_count(V.shape[1], n_w)
    if Y.shape[1] < 3 * m:
        raise ValidationError(f"need >= {3 * m} samples to fit n_w={n_w}")
    Phi = monomial_basis(V.T @ Y, n_w)
    WT, cond = _lstsq_monitored(Phi.T, Y.T, "parametrization")
    W = WT.T
    err = float(np.linalg.norm(W @ Phi - Y) / max(np.linalg.norm(Y), 1e-300))
    return ParametrizationFit(W=W, train_error=err, condition=cond)


@dataclass(frozen=True)
class ReducedDynamicsFit:
    R: Array
    eigvals: Array  # of the linear part
    test_nmte: float  # reduced-coordinate self-prediction on held-out decays
    condition: float


def fit_reduced_dynamics(
    centered_trajs: list,
    V: Array,
    n_r: int,
    test_trajs: list | None = None,
    require_stable: bool = True,
) -> ReducedDynamicsFit:
    """LS fit of ṙ ≈ R·mono(r) with finite-difference derivatives.

    ``centered_trajs`` are centered embedded Trajectories; derivatives come
    from 4th-order finite differencing of r(t) = Vᵀy(t) per trajectory.
    """
    R_blocks = []
    Rd_blocks = []
    for tr in centered_trajs:
        r_traj = tr.map_states(lambda s: V.T @ s)
        R_blocks.append(r_traj.states)
        Rd_blocks.append(finite_difference(r_traj).states)
    Rmat = np.hstack(R_blocks)
    Rdot = np.hstack(Rd_blocks)
    Phi = monomial_basis(Rmat, n_r)
    RT, cond = _lstsq_monitored(Phi.T, Rdot.T, "reduced dynamics")
    R = RT.T
    d = V.shape[1]
    lam = np.linalg.eigvals(R[:, :d])
    if require_stable and np.any(lam.real >= 0):
        raise StabilityViolation(
            f"fitted reduced linear part has non-decaying eigenvalues {lam}"
        )
    test_err = np.nan
    if test_trajs:
        preds, truths = [], []
        for tr in test_trajs:
            r_meas = V.T @ tr.states
            r_pred = _integrate_reduced(R, None, n_r, r_meas[:, 0], None, tr.times)
            preds.append(r_pred)
            truths.append(r_meas)
        test_err = nmte(preds, truths)
    return ReducedDynamicsFit(R=R, eigvals=lam, test_nmte=test_err, condition=cond)


def calibrate_control_matrix(
    model: StaticSSMModel,
    controlled_snapshots: Array,
    derivatives: Array,
    inputs: Array,
    mode: str = "deviation",
) -> StaticSSMModel:
    """Closed-form LS for B with V and R held fixed.

    Solves  min_B ‖VᵀẎ − R·mono(VᵀY) − B U‖²  over the controlled snapshots;
    in ``absolute`` mode the static input u_s is first subtracted from U.
    Returns a copy of the model with B set; the fit residual is stored on the
    returned model as ``b_residual``.
    """
    Y = np.asarray(controlled_snapshots, dtype=float)
    Yd = np.asarray(derivatives, dtype=float)
    U = np.asarray(inputs, dtype=float)
    if mode == "absolute":
        U = U - model.u_s[:, None]
    elif mode != "deviation":
        raise ValidationError("mode must be 'deviation' or 'absolute'")
    n_u = U.shape[0]
    svals = np.linalg.svd(U, compute_uv=False)
    if svals.size < n_u or svals[-1] <= 1e-10 * max(svals[0], 1e-300):
        Uu, ss, _ = np.linalg.svd(U, full_matrices=True)
        rank = int(np.sum(ss > 1e-10 * max(ss[0] if ss.size else 0.0, 1e-300)))
        raise UnidentifiableChannels(Uu[:, rank:])
    r_mat = model.V.T @ Y
    target = model.V.T @ Yd - model.R @ monomial_basis(r_mat, model.n_r)
    BT, _ = _lstsq_monitored(U.T, target.T, "control calibration")
    B = BT.T
    residual = float(np.linalg.norm(target - B @ U) / max(np.linalg.norm(target), 1e-300))
    out = replace(model, B=B)
    out.b_residual = residual
    return out


# ---------------------------------------------------------------------------
# orientation alignment
# ---------------------------------------------------------------------------


def _sign_pushforward(signs: Array, n: int) -> Array:
    """Diagonal action of r ↦ diag(signs)·r on the monomial basis."""
    E = monomial_exponents(signs.size, n)
    return np.prod(np.asarray(signs, dtype=float)[None, :] ** E, axis=1)


def align_orientations(models: list, reference: int = 0) -> list:
    """Give every model's tangent columns the reference's orientation.

    Sign flips are pushed through W, R and B analytically (monomial sign
    action), so lifted predictions are unchanged.  Near-orthogonal column
    pairings (|⟨v_ref, v⟩| < 0.1) trigger an ambiguous-alignment warning.
    """
    ref = models[reference]
    out = []
    for idx, m in enumerate(models):
        if m.d != ref.d or m.embedded_dim != ref.embedded_dim:
            raise ValidationError("models disagree in dimensions; cannot align")
        ips = np.sum(ref.V * m.V, axis=0)
        for j, ip in enumerate(ips):
            if abs(ip) < 0.1:
                warnings.warn(
                    f"model {idx}, column {j}: alignment inner product {ip:.3f} "
                    "is nearly orthogonal to the reference"
                )
        signs = np.where(ips < 0, -1.0, 1.0)
        if np.all(signs > 0):
            out.append(m)
            continue
        D = np.diag(signs)
        Sw = _sign_pushforward(signs, m.n_w)
        Sr = _sign_pushforward(signs, m.n_r)
        out.append(
            replace(
                m,
                V=m.V @ D,
                W=m.W * Sw[None, :],
                R=(D @ m.R) * Sr[None, :],
                B=None if m.B is None else D @ m.B,
            )
        )
    return out


# ---------------------------------------------------------------------------
# reduced simulation
# ---------------------------------------------------------------------------


def _integrate_reduced(R, B, n_r, r0, u_fn, times):
    dt = times[1] - times[0]
    r = np.asarray(r0, dtype=float).copy()
    out = np.empty((r.size, times.size))
    out[:, 0] = r
    guard = 1e3 * np.linalg.norm(r0) + 1.0

    def rhs(r, t):
        val = R @ monomial_basis(r, n_r)
        if B is not None and u_fn is not None:
            val = val + B @ np.asarray(u_fn(t), dtype=float)
        return val

    for k in range(1, times.size):
        t = times[k - 1]
        k1 = rhs(r, t)
        k2 = rhs(r + 0.5 * dt * k1, t + 0.5 * dt)
        k3 = rhs(r + 0.5 * dt * k2, t + 0.5 * dt)
        k4 = rhs(r + dt * k3, t + dt)
        r = r + (dt / 6.0) * (k1 + 2 * k2 + 2 * k3 + k4)
        if not np.all(np.isfinite(r)) or np.linalg.norm(r) > guard:
            raise ModelDomainExceeded(
                f"reduced state left model domain at t = {times[k]:.3f}"
            )
        out[:, k] = r
    return out


def simulate_reduced(
    model: StaticSSMModel,
    r0: Array,
    deviation_input,
    t_span: tuple,
    dt: float,
) -> tuple:
    """Integrate ṙ = R·mono(r) + B·u_d and lift to observable space.

    Returns (reduced Trajectory, lifted Trajectory).  Raises
    ModelDomainExceeded if ‖r‖ exceeds 10³‖r0‖ + 1 (far outside any region
    the polynomial maps were trained on).
    """
    t0, tf = float(t_span[0]), float(t_span[1])
    n = int(round((tf - t0) / dt)) + 1
    times = t0 + dt * np.arange(n)
    u_fn = None
    if deviation_input is not None:
        if callable(deviation_input):
            u_fn = deviation_input
        else:
            const = np.asarray(deviation_input, dtype=float)
            u_fn = lambda t: const
    r_states = _integrate_reduced(model.R, model.B, model.n_r, r0, u_fn, times)
    reduced = Trajectory(times, r_states, None, "controlled")
    lifted = Trajectory(times, model.lift(r_states), None, "controlled")
    return reduced, lifted


# ---------------------------------------------------------------------------
# whole-group fit
# ---------------------------------------------------------------------------


def fit_static_model(group, d: int, n_w: int, n_r: int) -> tuple:
    """Fit one StaticSSMModel from a DecayGroup; returns (model, diagnostics).

    Diagnostics include the singular spectrum, per-fit errors and — the
    headline score — the lifted NMTE on the group's held-out test decays
    (simulate the reduced model from the test trajectory's initial reduced
    state, lift, compare in observable space).
    """
    train = group.train
    test = group.test
    Y_train = np.hstack([tr.states for tr in train])
    tangent = fit_tangent_space(Y_train, d)
    V = tangent.V
    par = fit_parametrization(Y_train, V, n_w)
    red = fit_reduced_dynamics(train, V, n_r, test_trajs=test)
    model = StaticSSMModel(
        y_s=group.y_s,
        u_s=group.u_s,
        V=V,
        W=par.W,
        R=red.R,
        B=None,
        d=d,
        n_w=n_w,
        n_r=n_r,
    )
    preds, truths = [], []
    for tr in test:
        # group trajectories are already centered: chart without the anchor shift
        r0 = V.T @ tr.states[:, 0]
        _, lifted = simulate_reduced(
            model, r0, None, (tr.times[0], tr.times[-1]), tr.dt
        )
        preds.append(lifted.states - group.y_s[:, None])
        truths.append(tr.states)
    diagnostics = {
        "singular_values": tangent.singular_values,
        "parametrization_error": par.train_error,
        "reduced_eigvals": red.eigvals,
        "reduced_test_nmte": red.test_nmte,
        "lifted_test_nmte": nmte(preds, truths) if preds else np.nan,
    }
    return model, diagnostics


def order_sweep(group, d: int, orders: list) -> list:
    """Fit (n_w, n_r) candidates on one group; report test NMTE per order."""
    records = []
    for n_w, n_r in orders:
        try:
            _, diag = fit_static_model(group, d, n_w, n_r)
            records.append(
                {
                    "n_w": n_w,
                    "n_r": n_r,
                    "lifted_test_nmte": diag["lifted_test_nmte"],
                    "parametrization_error": diag["parametrization_error"],
                }
            )
        except (ConditioningError, StabilityViolation) as exc:
            records.append({"n_w": n_w, "n_r": n_r, "error": str(exc)})
    return records
