"""Exception hierarchy shared by the estimators, the simulation harness and the CLI.

The CLI maps each family to a stable exit code:
PanelValidationError / ConfigError -> 2, EstimationError -> 3,
StudyQualityError -> 4.
"""


class TridiffError(Exception):
    """Base class for every error raised by this package"""


class PanelValidationError(TridiffError, ValueError):
    """Input data violates the panel contract"""

    def __init__(self, message, unit_id=None, column=None):
        super().__init__(message)
        self.unit_id = unit_id
        self.column = column


class ConfigError(TridiffError, ValueError):
    """Invalid simulation, study or command-line configuration"""


class EstimationError(TridiffError):
    """An estimator could not produce a result"""


class EmptyCellError(EstimationError):
    """A required partition cell has no units"""

    def __init__(self, message, cell=None):
        super().__init__(message)
        self.cell = cell


class RankDeficientError(EstimationError):
    """Design matrix is rank deficient after pruning"""


class SeparationError(EstimationError):
    """Logistic fit diverged (perfect or quasi-perfect separation)"""


class SingularMatrixError(EstimationError):
    """Covariance block too ill-conditioned to invert"""


class OverlapError(EstimationError):
    """A single unit carries too much of a weight family"""


class BootstrapError(EstimationError):
    """Too many bootstrap replicates failed"""


class StudyQualityError(TridiffError):
    """Too many Monte Carlo iterations failed in one study cell"""

    def __init__(self, message, cell=None):
        super().__init__(message)
        self.cell = cell
