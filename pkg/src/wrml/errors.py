"""Exception hierarchy shared by all modules."""


class WRMLError(Exception):
    """Base class for every error raised by the package."""


class ConfigError(WRMLError):
    """Invalid or inconsistent configuration."""


class NumericalError(WRMLError):
    """Base class for numerical failures (bad factorizations, non-finite values...)."""


class DimensionMismatch(WRMLError, ValueError):
    pass


class NonPositiveEmbedding(NumericalError):
    """The circulant embedding has significantly negative eigenvalues."""

    def __init__(self, min_eigenvalue, max_eigenvalue):
        self.min_eigenvalue = float(min_eigenvalue)
        self.max_eigenvalue = float(max_eigenvalue)
        super().__init__(
            f"circulant embedding is not nonnegative definite: min eigenvalue "
            f"{self.min_eigenvalue:.3e} (max {self.max_eigenvalue:.3e}); "
            "enlarge the embedding"
        )


class SingularSystem(NumericalError):
    pass


class CFLViolation(NumericalError):
    pass


class LinearSolveFailure(NumericalError):
    pass


class RankDeficient(NumericalError):
    pass


class NonFiniteInput(NumericalError, ValueError):
    pass


class UnnormalizedWeights(WRMLError, ValueError):
    pass


class InsufficientReplicates(WRMLError, ValueError):
    pass


class EmptyGrid(WRMLError, ValueError):
    pass


class DegenerateEnsemble(NumericalError):
    pass


class ZeroVariance(NumericalError):
    pass


class DegenerateBasis(NumericalError):
    pass


class MaxIterationsExceeded(RuntimeWarning):
    """Issued (as a warning) when the smoother stops on its iteration cap."""
