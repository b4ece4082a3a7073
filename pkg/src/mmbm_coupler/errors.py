"""Exception types raised across the package."""


class MmbmError(ValueError):
    """Base class for every error raised by mmbm_coupler."""


class NonGenerator(MmbmError):
    pass


class NonDistribution(MmbmError):
    pass


class NonPositiveSigma(MmbmError):
    pass


class DimensionMismatch(MmbmError):
    pass


class LevelTooCoarse(MmbmError):
    """Observation intensity too small for P_n = I + 2Q/lambda to be stochastic."""


class InsufficientChain(MmbmError):
    pass


class LengthMismatch(MmbmError):
    pass


class NoConvergence(MmbmError):
    """Raised by callers that require a converged Riccati solve.

    ``solve_psi`` itself never raises this; it flags the result instead.
    """

    def __init__(self, message, result=None):
        super().__init__(message)
        self.result = result


class TooFewSamples(MmbmError):
    pass


class DegenerateInput(MmbmError):
    pass


class DomainError(MmbmError):
    pass


class EmptySample(MmbmError):
    pass


class ConfigError(MmbmError):
    """Bad or missing experiment configuration (CLI exit code 2)."""
