"""Exception types shared across stages.

Each class carries a short ``category`` used by the command line to print a
machine-parsable first line on failure.
"""


class DiffInjectError(Exception):
    category = "error"


class ConfigError(DiffInjectError, ValueError):
    category = "config"


class DomainError(DiffInjectError, ValueError):
    category = "domain"


class IngestionError(DiffInjectError):
    category = "ingestion"


class ManifestError(DiffInjectError):
    category = "manifest"


class TrainingError(DiffInjectError):
    category = "training"


class NumericalError(DiffInjectError, ArithmeticError):
    category = "numerical"


class CalibrationError(DiffInjectError):
    category = "calibration"


class PairingError(DiffInjectError):
    category = "pairing"


class ReportError(DiffInjectError):
    category = "report"


class StageError(DiffInjectError):
    """Wraps a failure inside a pipeline stage, keeping the stage name."""

    category = "stage"

    def __init__(self, stage: str, cause: BaseException):
        self.stage = stage
        self.cause = cause
        inner = getattr(cause, "category", type(cause).__name__)
        super().__init__(f"{stage}: [{inner}] {cause}")
