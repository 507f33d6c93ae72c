"""Exception types shared across the package."""


class WaveflowError(Exception):
    """Base class for all package errors."""


class ConfigurationError(WaveflowError):
    """Invalid configuration (bad knot counts, head widths, config files...)."""


class NumericalError(WaveflowError):
    """A numerical procedure failed (non-PD Gram matrix, non-convergence...)."""


class PathologicalDensityError(WaveflowError):
    """Rejection sampling exceeded the consecutive-rejection cap; the stated
    bound is almost certainly violated."""


class DegenerateWeightsError(WaveflowError):
    """All-zero raw weights cannot be normalized onto the unit sphere."""


class DomainError(WaveflowError):
    """Input coordinates outside the supported domain."""


class NonSmoothPointError(WaveflowError):
    """Second derivatives requested exactly at a knot of a spline without
    enough continuity there."""


class NanPropagationError(WaveflowError):
    """A non-finite value appeared during differentiation."""


class NodeProximityError(WaveflowError):
    """|psi| below the node guard; the sample must be discarded upstream."""


class UnsupportedEnforcementPointError(WaveflowError):
    """Boundary enforcement is only supported at the interval endpoints."""


class TooLargeError(WaveflowError):
    """Requested grid exceeds the configured memory cap."""


class ConvergenceError(NumericalError):
    """Iterative eigensolver did not reach the residual tolerance."""


class InsufficientStatesError(WaveflowError):
    """No antisymmetric state among the computed eigenpairs."""


class CheckpointError(WaveflowError):
    """Checkpoint file malformed or inconsistent with the requested model."""
