"""Exception and warning types shared across the toolkit."""


class PhenotyperError(Exception):
    """Base class for all toolkit errors."""


class ValidationError(PhenotyperError, ValueError):
    """Input or configuration failed validation."""


class MissingVisit(ValidationError):
    pass


class InfeasibleTargets(PhenotyperError):
    pass


class UnknownLevel(ValidationError):
    pass


class InsufficientDonors(PhenotyperError):
    pass


class SingularCovariance(PhenotyperError):
    pass


class DegenerateClass(ValidationError):
    pass


class NotContinuous(ValidationError):
    pass


class EmptyNode(ValidationError):
    pass


class SingleClass(ValidationError):
    pass


class NonFinite(PhenotyperError, FloatingPointError):
    pass


class CalibrationFailed(PhenotyperError):
    pass


class DegenerateComponent(PhenotyperError):
    pass


class ZeroVariance(ValidationError):
    pass


class DegenerateTable(ValidationError):
    pass


class LengthMismatch(ValidationError):
    pass


class TooFewSubjects(ValidationError):
    pass


class StageFailed(PhenotyperError):
    def __init__(self, stage, cause):
        self.stage = stage
        self.cause = cause
        super().__init__(f"stage {stage!r} failed: {cause}")


# Flagged conditions that do not abort the computation.

class PhenotyperWarning(UserWarning):
    pass


class SeparationDetected(PhenotyperWarning):
    pass


class NotConverged(PhenotyperWarning):
    pass


class EmptyOverlap(PhenotyperWarning):
    pass


class UnknownSubject(PhenotyperWarning):
    pass


class EmptyStratum(PhenotyperWarning):
    pass


class ClampedNeighbors(PhenotyperWarning):
    pass


class DegenerateCalibration(PhenotyperWarning):
    pass
