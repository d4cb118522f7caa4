"""Typed errors raised across the toolkit.

Every failure mode that callers are expected to catch gets its own class so
tests can assert on the type instead of parsing messages.
"""


class ClosedLoopError(Exception):
    """Base class for all toolkit errors."""


class StepLimitExceeded(ClosedLoopError):
    """Integrator hit max_steps before reaching the end of the span."""


class NonFiniteState(ClosedLoopError):
    """A state, stage, or error estimate became NaN or infinite."""


class OutOfSpan(ClosedLoopError):
    """Dense-output query time lies outside the integrated span."""


class GimbalLock(ClosedLoopError):
    """Euler-angle kinematics evaluated too close to the pitch singularity."""


class NewtonDiverged(ClosedLoopError):
    """Shooting Newton failed to reduce the residual within its budget."""


class ContinuationFailed(ClosedLoopError):
    """A continuation stage failed to converge; .stage is the failing index."""

    def __init__(self, stage, message=""):
        self.stage = stage
        super().__init__(message or f"continuation stage {stage} failed")


class TooManyFailures(ClosedLoopError):
    """More than the tolerated fraction of open-loop solves failed."""


class SchemaMismatch(ClosedLoopError):
    """Stored artifact disagrees with the expected schema or dimensions."""


class StorageError(ClosedLoopError):
    """Artifact file unreadable, truncated, or otherwise malformed."""


class MissingArtifact(ClosedLoopError):
    """A required input artifact does not exist on disk."""


class NonFiniteLoss(ClosedLoopError):
    """Training loss or gradient became NaN or infinite."""


class AllRolloutsDiverged(ClosedLoopError):
    """Every rollout in a policy-gradient batch diverged."""


class MissingReference(ClosedLoopError):
    """Evaluation requested for a state with no reference cost."""


class ConfigError(ClosedLoopError):
    """Experiment configuration failed schema validation."""
