"""Exception hierarchy shared by every module of the package."""


class Ema2VecError(Exception):
    """Base class for all package errors."""


class DegenerateFitError(Ema2VecError):
    """Least-squares basis is rank deficient."""


class NumericFaultError(Ema2VecError):
    """A non-finite value was produced or consumed."""

    def __init__(self, message: str, index: int | None = None):
        super().__init__(message)
        self.index = index


class DegenerateInputError(Ema2VecError):
    """Input vector has zero norm or is otherwise unusable."""


class DegenerateEmbeddingError(DegenerateInputError):
    """Time-embedding parameters collapsed to a (near) zero vector."""


class OrderingViolationError(Ema2VecError):
    """Negative delay or non-monotone timestamps."""


class ContractViolationError(Ema2VecError):
    """A caller broke an operation's precondition."""


class InsufficientDataError(Ema2VecError):
    """Not enough valid observations for the requested computation."""


class UnusableSampleError(Ema2VecError):
    """Every step of a sample is masked."""


class DivergedTrainingError(Ema2VecError):
    """Loss became non-finite during training."""

    def __init__(self, epoch: int, batch: int, loss: float):
        super().__init__(f"training diverged at epoch {epoch}, batch {batch} (loss={loss})")
        self.epoch = epoch
        self.batch = batch
        self.loss = loss


class SchemaError(Ema2VecError):
    """An input file does not conform to its documented format."""

    def __init__(self, message: str, path: str | None = None, row: int | None = None):
        where = ""
        if path is not None:
            where += f"{path}"
        if row is not None:
            where += f":{row}"
        super().__init__(f"{where}: {message}" if where else message)
        self.path = path
        self.row = row


class CheckpointMismatchError(Ema2VecError):
    """Checkpoint version, variant or shapes do not match what was requested."""
