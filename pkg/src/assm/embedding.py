"""Delay embedding, snapshot assembly, derivative estimation, NMTE.

The fitting pipeline consumes *centered* snapshot matrices: trajectories are
truncated to their settled final sections, delay-embedded, and shifted so the
group's steady state sits at the origin.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field

import numpy as np

from .dynamics import Trajectory
from .errors import EmbeddingLengthError, UndefinedNormalizer, ValidationError

Array = np.ndarray


@dataclass(frozen=True)
class EmbeddingSpec:
    """Delay-embedding layout: p stacked copies separated by lag τ."""

    copies: int = 1
    lag: float = 0.01  # seconds, integer multiple of the trajectory dt
    obs_dim: int = 4

    def __post_init__(self) -> None:
        if self.copies < 1:
            raise ValidationError("need at least one copy")

    @property
    def embedded_dim(self) -> int:
        return self.copies * self.obs_dim

    def lag_steps(self, dt: float) -> int:
        steps = self.lag / dt
        if abs(steps - round(steps)) > 1e-9:
            raise ValidationError("lag must be an integer multiple of dt")
        return int(round(steps))

    def check_dimension(self, d: int) -> None:
        if self.embedded_dim < 2 * d + 1:
            warnings.warn(
                f"embedded dimension {self.embedded_dim} < 2d+1 = {2 * d + 1}; "
                "delay reconstruction may be ambiguous",
                stacklevel=2,
            )


def delay_embed(traj: Trajectory, spec: EmbeddingSpec) -> Trajectory:
    """Stack p delayed copies: column k holds y(t_k), y(t_k+τ), …

    Output keeps the *leading* time stamps, so its length shrinks by
    (p−1)·(τ/dt) samples.  For p = 1 this is the identity.
    """
    if spec.copies == 1:
        return traj
    L = spec.lag_steps(traj.dt)
    n = traj.n_samples
    span = (spec.copies - 1) * L
    if n <= span:
        raise EmbeddingLengthError(
            f"trajectory of {n} samples too short for {spec.copies} copies at lag {L}"
        )
    m = n - span
    blocks = [traj.states[:, k * L : k * L + m] for k in range(spec.copies)]
    inputs = None if traj.inputs is None else traj.inputs[:, :m]
    return Trajectory(traj.times[:m], np.vstack(blocks), inputs, traj.label)


def embed_anchor(y_s: Array, spec: EmbeddingSpec) -> Array:
    """Embedded image of a steady observable: the same copy stacked p times."""
    return np.tile(np.asarray(y_s, dtype=float), spec.copies)


@dataclass
class DecayGroup:
    """All training material attached to one static input u_s.

    Trajectories are stored delay-embedded and centered about the embedded
    steady state ``y_s``; ``split`` tags each decay as train or test.
    Controlled runs carry the *deviation* inputs in their input record.
    """

    u_s: Array
    y_s: Array  # embedded steady state
    decays: list
    split: list
    controlled: list = field(default_factory=list)

    @property
    def train(self) -> list:
        return [tr for tr, tag in zip(self.decays, self.split) if tag == "train"]

    @property
    def test(self) -> list:
        return [tr for tr, tag in zip(self.decays, self.split) if tag == "test"]


@dataclass
class TrainingSet:
    spec: EmbeddingSpec
    groups: list

    @property
    def static_inputs(self) -> Array:
        return np.array([g.u_s for g in self.groups])

    @property
    def anchors(self) -> Array:
        return np.array([g.y_s for g in self.groups])


def assemble_training_set(
    decays: list,
    controlled: list | None = None,
    truncate_to: float | None = None,
    split_fraction: float = 0.5,
    spec: EmbeddingSpec = EmbeddingSpec(),
    static_inputs: list | None = None,
    anchors: list | None = None,
    settle_tol: float = 1e-5,
) -> TrainingSet:
    """Truncate, embed, center and split grouped trajectories.

    Parameters
    ----------
    decays:
        List of groups; each group is a list of raw observable trajectories
        sharing one static input.
    controlled:
        Optional list (aligned with groups) of controlled-response
        trajectories whose input records hold the *deviation* from u_s.
    truncate_to:
        Keep only the final ``truncate_to`` seconds of each decay (the
        settled section); ``None`` keeps everything.
    anchors:
        Per-group steady observables; defaults to the mean final sample of
        the group's decays.

    The first ⌈split_fraction·count⌉ decays of each group (stable order) are
    tagged train, the rest test.  A decay whose centered final column exceeds
    ``settle_tol`` raises: the trajectory has not settled onto its anchor.
    """
    groups = []
    n_groups = len(decays)
    if static_inputs is None:
        static_inputs = [np.zeros(1)] * n_groups
    for gi, group in enumerate(decays):
        if len(group) == 0:
            raise ValidationError(f"group {gi} is empty")
        if len(group) < 2:
            raise ValidationError(f"group {gi} needs >= 2 decays for a train/test split")
        processed = []
        for tr in group:
            cut = tr if truncate_to is None else tr.tail(truncate_to)
            processed.append(delay_embed(cut, spec))
        if anchors is not None:
            y_s = embed_anchor(anchors[gi], spec)
        else:
            y_s = np.mean([tr.states[:, -1] for tr in processed], axis=0)
        centered = [tr.map_states(lambda s: s - y_s[:, None]) for tr in processed]
        for tr in centered:
            tail_norm = float(np.linalg.norm(tr.states[:, -1]))
            if tail_norm > settle_tol:
                raise ValidationError(
                    f"group {gi}: decay final column norm {tail_norm:.3e} exceeds "
                    f"settle tolerance {settle_tol:.1e}"
                )
        n_train = int(np.ceil(split_fraction * len(centered)))
        split = ["train" if i < n_train else "test" for i in range(len(centered))]
        ctl = []
        if controlled is not None and gi < len(controlled):
            for tr in controlled[gi]:
                emb = delay_embed(tr, spec)
                ctl.append(emb.map_states(lambda s: s - y_s[:, None]))
        groups.append(
            DecayGroup(
                u_s=np.asarray(static_inputs[gi], dtype=float),
                y_s=y_s,
                decays=centered,
                split=split,
                controlled=ctl,
            )
        )
    return TrainingSet(spec=spec, groups=groups)


def finite_difference(traj: Trajectory) -> Trajectory:
    """Differentiate samples: 4th-order central interior, 2nd-order one-sided ends."""
    Y = traj.states
    n = Y.shape[1]
    if n < 3:
        raise ValidationError("need at least 3 samples to differentiate")
    h = traj.dt
    D = np.empty_like(Y)
    if n >= 5:
        D[:, 2:-2] = (Y[:, :-4] - 8 * Y[:, 1:-3] + 8 * Y[:, 3:-1] - Y[:, 4:]) / (12 * h)
        inner = [1, n - 2]
    else:
        inner = list(range(1, n - 1))
    for k in inner:  # 2nd-order central just inside the boundary
        D[:, k] = (Y[:, k + 1] - Y[:, k - 1]) / (2 * h)
    D[:, 0] = (-3 * Y[:, 0] + 4 * Y[:, 1] - Y[:, 2]) / (2 * h)
    D[:, -1] = (3 * Y[:, -1] - 4 * Y[:, -2] + Y[:, -3]) / (2 * h)
    return Trajectory(traj.times, D, None, traj.label)


def _pairs(pred, truth):
    def states(obj):
        return obj.states if isinstance(obj, Trajectory) else np.asarray(obj, dtype=float)

    if isinstance(pred, (list, tuple)):
        return [(states(p), states(t)) for p, t in zip(pred, truth)]
    return [(states(pred), states(truth))]


def nmte(pred, truth) -> float:
    """Normalized mean trajectory error.

    Per trajectory: mean over samples of ‖y_pred − y_true‖, divided by the
    trajectory's peak ‖y_true‖; the result is averaged over trajectories.
    Accepts single trajectories/arrays or aligned sequences of them.
    """
    scores = []
    for P, T in _pairs(pred, truth):
        if P.shape != T.shape:
            raise ValidationError(f"prediction {P.shape} misaligned with truth {T.shape}")
        norms = np.linalg.norm(T, axis=0)
        peak = float(np.max(norms))
        if peak <= 0.0:
            raise UndefinedNormalizer("truth trajectory has zero peak norm")
        scores.append(float(np.mean(np.linalg.norm(P - T, axis=0))) / peak)
    return float(np.mean(scores))
