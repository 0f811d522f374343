"""Workspace target tracks for open- and closed-loop experiments."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import ValidationError
from .signals import perlin_noise_1d, rescale_to_interval

Array = np.ndarray


@dataclass
class TargetTrack:
    """Sampled workspace path Γ(t) with a linear-interpolation evaluator."""

    times: Array
    values: Array  # (w, n_t)

    def __post_init__(self) -> None:
        self.times = np.asarray(self.times, dtype=float)
        self.values = np.atleast_2d(np.asarray(self.values, dtype=float))
        if self.values.shape[1] != self.times.size:
            raise ValidationError("target values misaligned with times")
        if np.any(np.diff(self.times) <= 0):
            raise ValidationError("target times must be strictly increasing")
        if not (np.all(np.isfinite(self.times)) and np.all(np.isfinite(self.values))):
            raise ValidationError("target track must be finite")

    @property
    def w(self) -> int:
        return int(self.values.shape[0])

    @property
    def horizon(self) -> tuple:
        return float(self.times[0]), float(self.times[-1])

    def __call__(self, t) -> Array:
        """Evaluate by linear interpolation; clamps outside the horizon."""
        t = np.asarray(t, dtype=float)
        out = np.stack([np.interp(t, self.times, row) for row in self.values])
        return out

    def mean_speed(self) -> float:
        """Time-average of ‖Γ̇‖ by finite differencing the samples."""
        dt = np.diff(self.times)
        vel = np.diff(self.values, axis=1) / dt
        return float(np.mean(np.linalg.norm(vel, axis=0)))


def generate_perlin_target(
    seed: int, duration: float, dt: float, box: Array, cells: float = 3.0
) -> TargetTrack:
    """Smooth gradient-noise target, one independent channel per box row.

    Each output dimension gets its own seeded gradient sequence (seed offset
    by the dimension index) and is min-max rescaled into its box interval.
    ``cells`` sets how many lattice cells — roughly oscillations — fit in the
    duration.
    """
    if duration <= 0 or dt <= 0:
        raise ValidationError("duration and dt must be positive")
    box = np.atleast_2d(np.asarray(box, dtype=float))
    n = int(round(duration / dt)) + 1
    times = dt * np.arange(n)
    rows = []
    for j, (lo, hi) in enumerate(box):
        raw = perlin_noise_1d(int(seed) + 1000003 * j, n, cells)
        rows.append(rescale_to_interval(raw, lo, hi))
    return TargetTrack(times, np.vstack(rows))


def figure_eight_target(
    amplitude: float,
    period: float,
    duration: float,
    dt: float,
    center: Array | None = None,
) -> TargetTrack:
    """Lissajous 1:2 figure-8: Γ(t) = center + a·(sin ωt, sin 2ωt)."""
    n = int(round(duration / dt)) + 1
    times = dt * np.arange(n)
    om = 2.0 * np.pi / period
    vals = amplitude * np.vstack([np.sin(om * times), np.sin(2.0 * om * times)])
    if center is not None:
        vals = vals + np.asarray(center, dtype=float)[:, None]
    return TargetTrack(times, vals)


def constant_target(value: Array, duration: float, dt: float) -> TargetTrack:
    value = np.atleast_1d(np.asarray(value, dtype=float))
    n = int(round(duration / dt)) + 1
    times = dt * np.arange(n)
    return TargetTrack(times, np.tile(value[:, None], (1, n)))
