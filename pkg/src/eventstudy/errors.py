"""Exception types. ``exit_code`` is what the command line returns for each."""


class EventStudyError(Exception):
    exit_code = 1


class ConfigError(EventStudyError, ValueError):
    exit_code = 2


class SpecError(ConfigError):
    """Model definition refers to something that does not exist."""


class DataValidationError(EventStudyError, ValueError):
    exit_code = 3


class OverlapError(DataValidationError):
    """A municipality sits inside the buffers of two distinct events."""


class DegenerateScaleError(DataValidationError):
    def __init__(self, year):
        super().__init__(f"zero variance in outcome for year {year}; cannot standardize")
        self.year = year


class SampleError(DataValidationError):
    """The requested estimation sample is empty or unusable."""


class NonConvergenceError(EventStudyError, ArithmeticError):
    exit_code = 4

    def __init__(self, iterations, max_group_residual):
        super().__init__(
            f"fixed-effect absorption did not converge after {iterations} sweeps "
            f"(max group residual {max_group_residual:.3e})"
        )
        self.iterations = iterations
        self.max_group_residual = max_group_residual


class DegenerateModelError(EventStudyError, ArithmeticError):
    exit_code = 5


class InferenceError(EventStudyError, ArithmeticError):
    """Covariance or test statistic cannot be formed (e.g. one cluster)."""
    exit_code = 5
