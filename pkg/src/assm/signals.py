"""Seeded signal generators used for data collection and validation.

All generators are deterministic functions of their seed: identical calls
produce bitwise-identical arrays.
"""

from __future__ import annotations

import numpy as np

from .errors import ValidationError

Array = np.ndarray


def _quintic_fade(t: Array) -> Array:
    # 6t^5 - 15t^4 + 10t^3: zero first/second derivative at lattice points
    return t * t * t * (t * (t * 6.0 - 15.0) + 10.0)


def perlin_noise_1d(seed: int, n_samples: int, cells: float) -> Array:
    """Single-octave 1-D gradient noise over `cells` integer lattice cells.

    Gradients are drawn once per lattice point from a seeded PRNG; values
    between lattice points blend the two neighbouring gradient ramps with a
    quintic fade, giving a C² signal that vanishes at every lattice point.
    """
    rng = np.random.default_rng(seed)
    n_lattice = int(np.ceil(cells)) + 2
    grads = rng.uniform(-1.0, 1.0, n_lattice)
    s = np.linspace(0.0, cells, n_samples)
    i0 = np.floor(s).astype(int)
    frac = s - i0
    g0 = grads[i0]
    g1 = grads[i0 + 1]
    n0 = g0 * frac
    n1 = g1 * (frac - 1.0)
    u = _quintic_fade(frac)
    return n0 + u * (n1 - n0)


def rescale_to_interval(values: Array, lo: float, hi: float) -> Array:
    """Min-max rescale; degenerate (constant) input maps to the midpoint."""
    vmin, vmax = float(np.min(values)), float(np.max(values))
    if vmax - vmin < 1e-15:
        return np.full_like(values, 0.5 * (lo + hi))
    return lo + (values - vmin) * (hi - lo) / (vmax - vmin)


def generate_lorenz_deviation(
    seed: int, duration: float, dt: float, delta: float
) -> Array:
    """Chaotic scalar deviation signal from the Lorenz system.

    Integrates the Lorenz equations (σ = 10, ρ = 28, β = 8/3) from a seeded
    random initial condition, discards a 10 s transient, takes the first
    component, min-max rescales it to [−1, 1] and multiplies by ``delta``.
    Returns ``round(duration/dt) + 1`` samples.
    """
    if delta < 0:
        raise ValidationError("delta must be nonnegative")
    n_out = int(round(duration / dt)) + 1
    if delta == 0.0:
        return np.zeros(n_out)
    sigma, rho, beta = 10.0, 28.0, 8.0 / 3.0
    rng = np.random.default_rng(seed)
    x, y, z = rng.uniform(-1.0, 1.0, 3) + np.array([1.0, 1.0, rho - 1.0])

    def step(x, y, z, h):
        # classical RK4 in scalars (hot loop)
        def f(x, y, z):
            return sigma * (y - x), x * (rho - z) - y, x * y - beta * z

        a1, b1, c1 = f(x, y, z)
        a2, b2, c2 = f(x + 0.5 * h * a1, y + 0.5 * h * b1, z + 0.5 * h * c1)
        a3, b3, c3 = f(x + 0.5 * h * a2, y + 0.5 * h * b2, z + 0.5 * h * c2)
        a4, b4, c4 = f(x + h * a3, y + h * b3, z + h * c3)
        return (
            x + h / 6.0 * (a1 + 2 * a2 + 2 * a3 + a4),
            y + h / 6.0 * (b1 + 2 * b2 + 2 * b3 + b4),
            z + h / 6.0 * (c1 + 2 * c2 + 2 * c3 + c4),
        )

    dt_int = 1e-3
    for _ in range(int(round(10.0 / dt_int))):
        x, y, z = step(x, y, z, dt_int)
    # record the first component on the requested grid
    stride = max(1, int(round(dt / dt_int)))
    n_fine = (n_out - 1) * stride + 1
    xs = np.empty(n_fine)
    xs[0] = x
    for k in range(1, n_fine):
        x, y, z = step(x, y, z, dt_int)
        xs[k] = x
    coarse = xs[::stride]
    return rescale_to_interval(coarse, -1.0, 1.0) * delta


def sample_lhs(seed: int, count: int, box: Array) -> Array:
    """Latin hypercube sample: one point per stratum along every dimension.

    ``box`` is ``(dims, 2)`` with columns [lo, hi].  Returns ``(count, dims)``.
    """
    if count < 1:
        raise ValidationError("count must be >= 1")
    box = np.atleast_2d(np.asarray(box, dtype=float))
    rng = np.random.default_rng(seed)
    dims = box.shape[0]
    out = np.empty((count, dims))
    for j in range(dims):
        strata = (np.arange(count) + rng.uniform(0.0, 1.0, count)) / count
        rng.shuffle(strata)
        out[:, j] = box[j, 0] + strata * (box[j, 1] - box[j, 0])
    return out


def as_signal(values: Array, dt: float, t0: float = 0.0):
    """Wrap uniformly sampled values (1-D or (dim, n)) as a callable of t."""
    values = np.asarray(values, dtype=float)
    n = values.shape[-1]
    tmax = t0 + (n - 1) * dt

    def fn(t):
        tc = min(max(t, t0), tmax)
        pos = (tc - t0) / dt
        i = min(int(pos), n - 2)
        w = pos - i
        if values.ndim == 1:
            return values[i] * (1 - w) + values[i + 1] * w
        return values[:, i] * (1 - w) + values[:, i + 1] * w

    return fn


def zoh_signal(values: Array, dt: float, t0: float = 0.0):
    """Zero-order-hold interpolator for (dim, n) input tables."""
    values = np.asarray(values, dtype=float)
    n = values.shape[-1]

    def fn(t):
        i = int(np.floor((t - t0) / dt + 1e-9))
        i = min(max(i, 0), n - 1)
        return values[..., i]

    return fn
