"""Exception types shared across the package."""


class GahbError(Exception):
    """Base class for all package errors."""


class DimensionMismatch(GahbError):
    """Raised when tensor shapes disagree; names the offending axis."""

    def __init__(self, axis: str, expected, got, context: str = ""):
        self.axis = axis
        self.expected = expected
        self.got = got
        msg = f"dimension mismatch on axis '{axis}': expected {expected}, got {got}"
        if context:
            msg = f"{context}: {msg}"
        super().__init__(msg)


class DatasetError(GahbError):
    """Invalid dataset specification or unreadable source data."""


class CheckpointError(GahbError):
    """Corrupt, truncated, or incompatible checkpoint file."""


class TrainingDiverged(GahbError):
    """Loss became non-finite during training."""

    def __init__(self, step: int, loss):
        self.step = step
        self.loss = loss
        super().__init__(f"non-finite loss {loss!r} at step {step}")


class SamplerError(GahbError):
    """Sampler produced a non-finite iterate."""


class OracleError(GahbError):
    """Invalid prior parameters or ill-posed closed-form query."""


class AnalysisError(GahbError):
    """Analysis request outside the supported regime (size, window, basis)."""
