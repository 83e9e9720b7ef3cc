"""Exception types shared across the package."""


class SatcrossError(Exception):
    """Base class for all package errors."""


# --- corpus ---------------------------------------------------------------

class MalformedRecord(SatcrossError):
    def __init__(self, line: int, field: str, reason: str = ""):
        self.line = line
        self.field = field
        msg = f"line {line}: bad field '{field}'"
        if reason:
            msg += f" ({reason})"
        super().__init__(msg)


class DuplicateId(SatcrossError):
    def __init__(self, record_id: str):
        self.record_id = record_id
        super().__init__(f"duplicate record id '{record_id}'")


class MixedImageRepresentation(SatcrossError):
    pass


class EmptyCorpus(SatcrossError):
    pass


# --- numerics -------------------------------------------------------------

class DimensionMismatch(SatcrossError):
    pass


class ZeroVector(SatcrossError):
    pass


# --- segments -------------------------------------------------------------

class EmptySegmentSet(SatcrossError):
    pass


# --- encoders -------------------------------------------------------------

class NonDivisibleImage(SatcrossError):
    pass


class MissingEOS(SatcrossError):
    pass


class IncompatibleCheckpoint(SatcrossError):
    pass


# --- training -------------------------------------------------------------

class BatchTooSmall(SatcrossError):
    pass


class DivergedLoss(SatcrossError):
    def __init__(self, message: str, state: dict | None = None):
        self.state = state or {}
        super().__init__(message)


class InsufficientSources(SatcrossError):
    pass


# --- evaluation / analysis ------------------------------------------------

class EmptyGallery(SatcrossError):
    pass


class DegenerateVariance(SatcrossError):
    pass


class TooFewPoints(SatcrossError):
    pass


# --- cli ------------------------------------------------------------------

class UnknownCommand(SatcrossError):
    pass


class ConfigError(SatcrossError):
    def __init__(self, field: str, reason: str = ""):
        self.field = field
        msg = f"config field '{field}'"
        if reason:
            msg += f": {reason}"
        super().__init__(msg)
