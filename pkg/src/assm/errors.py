"""Exception taxonomy shared across the package.

Validation problems (bad configs, contract violations) raise
:class:`ValidationError`; anything that fails *numerically* at runtime
(divergence, no steady state, ill conditioning) raises a subclass of
:class:`NumericalFailure`.  The CLI maps these onto exit codes 2 and 3.
"""

from __future__ import annotations


class ValidationError(ValueError):
    """Input/contract violation detected before any heavy numerics ran."""


class NumericalFailure(RuntimeError):
    """Base class for runtime numerical breakdowns."""


class IntegrationDiverged(NumericalFailure):
    """Non-finite state during time integration.

    Carries the last time at which the state was still finite.
    """

    def __init__(self, t_last: float, message: str = ""):
        self.t_last = float(t_last)
        super().__init__(message or f"integration diverged after t = {t_last:.6g} s")


class NoSteadyState(NumericalFailure):
    """Neither Newton nor long-horizon integration found an equilibrium."""


class ConditioningError(NumericalFailure):
    """Least-squares regressor condition number exceeded the safe budget."""


class StabilityViolation(NumericalFailure):
    """Fitted reduced linear part has a non-decaying eigenvalue."""


class UnidentifiableChannels(NumericalFailure):
    """Input matrix is rank deficient; carries the unidentifiable directions."""

    def __init__(self, null_directions, message: str = ""):
        self.null_directions = null_directions
        super().__init__(message or "input record does not excite all channels")


class InfeasibleHorizon(NumericalFailure):
    """The per-horizon QP stayed infeasible even after constraint softening."""


class ModelDomainExceeded(NumericalFailure):
    """Reduced state left the trust domain of a fitted model (blow-up guard)."""


class EmbeddingLengthError(ValidationError):
    """Trajectory too short for the requested delay embedding."""


class UndefinedNormalizer(ValidationError):
    """NMTE normalizer (peak truth norm) is zero for some trajectory."""
