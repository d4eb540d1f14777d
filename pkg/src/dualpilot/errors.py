"""Exception types shared across the package."""


class DualPilotError(Exception):
    """Base class for all package errors."""


class InvalidMapping(DualPilotError):
    pass


class ParseError(DualPilotError):
    def __init__(self, message, line=None):
        self.line = line
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)


class DuplicateTurn(ParseError):
    pass


class SplitViolation(DualPilotError):
    pass


class SameMeeting(DualPilotError):
    pass


class EmptyCorpus(DualPilotError):
    pass


class DimMismatch(DualPilotError, ValueError):
    pass


class EmptyReplay(DualPilotError):
    pass


class MissingGroundTruth(DualPilotError):
    pass


class EmptyIndex(DualPilotError):
    pass


class EmptyInput(DualPilotError):
    pass


class FixtureMissing(DualPilotError):
    pass


class BackendFailure(DualPilotError):
    pass


class EmptyTraces(DualPilotError):
    pass


class BadWeights(DualPilotError, ValueError):
    pass


class LengthMismatch(DualPilotError, ValueError):
    pass


class DegenerateInput(DualPilotError, ValueError):
    pass


class DegenerateAgreement(DualPilotError, ValueError):
    pass


class BadDistribution(DualPilotError, ValueError):
    pass


class EmptyTE(DualPilotError):
    pass


class EmptyReference(DualPilotError, ValueError):
    pass
