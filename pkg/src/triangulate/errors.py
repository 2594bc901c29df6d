"""Exception hierarchy shared by every module of the package."""

from __future__ import annotations


class TriangulateError(Exception):
    """Base class for all package errors."""


# -- model fitting ---------------------------------------------------------


class FitError(TriangulateError):
    """A regression could not be fitted."""


class RankDeficient(FitError):
    def __init__(self, columns):
        self.columns = list(columns)
        super().__init__(f"design matrix is rank deficient; dependent columns: {self.columns}")


class DimensionMismatch(FitError):
    pass


class Separation(FitError):
    """Fitted probabilities pinned at 0/1 with diverging coefficients."""


class NotConverged(FitError):
    pass


class UnknownTerm(TriangulateError, KeyError):
    def __init__(self, term):
        self.term = term
        super().__init__(f"unknown model term {term!r}")

    def __str__(self):
        return self.args[0]


class MissingInteractionColumn(UnknownTerm):
    pass


# -- data ingestion --------------------------------------------------------


class CohortError(TriangulateError):
    pass


class MissingColumn(CohortError):
    def __init__(self, column):
        self.column = column
        super().__init__(f"missing required column {column!r}")


class BadValue(CohortError):
    def __init__(self, row, column, value=None):
        self.row = row
        self.column = column
        self.value = value
        super().__init__(f"bad value {value!r} in row {row}, column {column!r}")


class EmptyCohort(CohortError):
    pass


class UnknownCluster(CohortError):
    def __init__(self, clusters):
        self.clusters = sorted(clusters, key=str)
        super().__init__(f"clusters without any prescription history: {self.clusters}")


class MissingInstrument(CohortError):
    pass


class MissingPriorOutcome(CohortError):
    pass


# -- estimation ------------------------------------------------------------


class EstimationError(TriangulateError):
    pass


class ZeroDenominator(EstimationError):
    pass


class EmptyMatchedSet(EstimationError):
    pass


class NoControls(EstimationError):
    pass


class TooManyFailedReplicates(EstimationError):
    def __init__(self, failed, total):
        self.failed = failed
        self.total = total
        super().__init__(f"{failed} of {total} bootstrap replicates failed (limit 10%)")


class ZeroVariance(EstimationError):
    pass


class ProbabilityOutOfRange(TriangulateError):
    def __init__(self, fraction):
        self.fraction = fraction
        super().__init__(
            f"{fraction:.4%} of Bernoulli probabilities fell outside [0, 1] (limit 0.1%)"
        )


# -- warnings --------------------------------------------------------------


class WeakInstrumentWarning(UserWarning):
    pass


class SingularCovarianceWarning(UserWarning):
    pass
