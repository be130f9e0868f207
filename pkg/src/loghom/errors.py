"""Exception types shared across the package."""


class LoghomError(Exception):
    """Base class for all package errors."""


class ConfigError(LoghomError):
    """Invalid or inconsistent configuration."""


class SpectrumNotPSD(LoghomError):
    """Periodized covariance has a significantly negative Fourier eigenvalue.

    Carries the worst offending mode so the caller can see how badly the
    periodization failed (this invalidates every downstream statistic, so it
    is an error rather than a warning).
    """

    def __init__(self, worst_value, worst_mode, max_value):
        self.worst_value = worst_value
        self.worst_mode = tuple(int(m) for m in worst_mode)
        self.max_value = max_value
        super().__init__(
            f"covariance spectrum not PSD: eigenvalue {worst_value:.3e} at mode "
            f"{self.worst_mode} (max eigenvalue {max_value:.3e})"
        )


class BadTruncation(LoghomError):
    """Truncation level M < 1."""


class GridMismatch(LoghomError):
    """Fields defined on incompatible grids."""


class SingularCoefficient(LoghomError):
    """Nonpositive edge coefficient handed to a solver."""


class NoConvergence(LoghomError):
    """Iterative solve hit max_iter; carries the residual history."""

    def __init__(self, iterations, relative_residual, history):
        self.iterations = iterations
        self.relative_residual = relative_residual
        self.history = history
        super().__init__(
            f"CG did not converge after {iterations} iterations "
            f"(relative residual {relative_residual:.3e})"
        )


class BallTooLarge(LoghomError):
    """Requested ball does not fit in the torus (radius > side_length / 4)."""


class SaturatedRadius(LoghomError):
    """No admissible radius exists below the saturation scale."""

    def __init__(self, where=None):
        self.where = where
        super().__init__(f"radius saturated at {where!r}")


class InsufficientTail(LoghomError):
    """Too few (or degenerate) samples for a tail fit."""


class ScaleMismatch(LoghomError):
    """Scale ratio leaves too few lattice cells to resolve the test function."""


class RankDeficient(LoghomError):
    """Test-function basis does not identify the requested tensor components."""


class ConfigMismatch(LoghomError):
    """Replica records built from different configurations."""


class MixedKinds(LoghomError):
    """Records of different experiment kinds passed to a single reduction."""


class ExperimentFailure(LoghomError):
    """More than the tolerated fraction of replicas errored."""
