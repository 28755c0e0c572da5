from typing import Optional


class Fp8FlError(Exception):
    """Base class for every error raised by the simulator."""


class QuantizationError(Fp8FlError, ValueError):
    """Invalid input to the FP8 codec (non-finite value, bad clip, off-grid value)."""


class BlobFormatError(Fp8FlError, ValueError):
    """A serialized FP8 tensor blob is truncated or carries an unknown header."""


class TrainingDivergedError(Fp8FlError, RuntimeError):
    """The training loss became non-finite."""


class EmptyShardError(Fp8FlError, ValueError):
    """A client was asked to train without any local examples."""


class ClientTrainingError(Fp8FlError, RuntimeError):
    """A client task failed; carries the client id so the round report can name it."""

    def __init__(self, client_id: int, cause: Exception):
        self.client_id = client_id
        self.cause = cause
        super().__init__(f"client {client_id}: {cause}")


class StragglerError(Fp8FlError, RuntimeError):
    """An active client did not report before aggregation."""


class PartitionError(Fp8FlError, ValueError):
    """A dataset could not be partitioned under the requested scheme."""


class LedgerError(Fp8FlError, ValueError):
    """Round ledger misuse, e.g. an out-of-order round."""


class ThresholdNotReachedError(Fp8FlError, ValueError):
    """The gain threshold is never reached by one of the compared runs."""


class ConfigError(Fp8FlError, ValueError):
    """Invalid run configuration; `line` points at the offending line when known."""

    def __init__(self, message: str, line: Optional[int] = None, path: Optional[str] = None):
        self.line = line
        self.path = path
        location = ""
        if path is not None and line is not None:
            location = f"{path}:{line}: "
        elif line is not None:
            location = f"line {line}: "
        super().__init__(f"{location}{message}")
