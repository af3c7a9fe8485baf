"""Exception hierarchy shared by every ltuning module."""

from typing import Sequence


class LTuningError(Exception):
    """Base class for all ltuning errors."""


class ShapeError(LTuningError, ValueError):
    def __init__(self, message: str, *shapes: Sequence[int]):
        if shapes:
            message = f"{message}: " + " vs ".join(str(tuple(s)) for s in shapes)
        super().__init__(message)
        self.shapes = tuple(tuple(s) for s in shapes)


class VocabularyError(LTuningError, ValueError):
    def __init__(self, token_id: int, vocab_size: int):
        super().__init__(f"token id {token_id} outside vocabulary [0, {vocab_size})")
        self.token_id = token_id
        self.vocab_size = vocab_size


class SequenceLengthError(LTuningError, ValueError):
    pass


class BackboneConfigError(LTuningError, ValueError):
    pass


class ConfigError(LTuningError, ValueError):
    pass


class AdapterError(LTuningError, ValueError):
    pass


class TrainingError(LTuningError):
    pass


class MissingGradientError(TrainingError):
    def __init__(self, name: str):
        super().__init__(f"parameter '{name}' has no gradient")
        self.name = name


class TrainingDivergedError(TrainingError):
    def __init__(self, step: int, loss: float):
        super().__init__(f"training diverged at step {step}: loss={loss}")
        self.step = step
        self.loss = loss


class WeightFileError(LTuningError):
    pass


class WeightFormatError(WeightFileError):
    pass


class WeightVersionError(WeightFileError):
    pass


class WeightTruncatedError(WeightFileError):
    pass


class WeightChecksumError(WeightFileError):
    pass


class DataError(LTuningError):
    pass


class IngestionError(DataError):
    def __init__(self, message: str, line: int = 0, path: str = ''):
        where = f"{path}:{line}" if path else f"line {line}"
        super().__init__(f"{where}: {message}" if line else message)
        self.line = line
        self.path = path


class MissingColumnError(DataError):
    def __init__(self, column: str, available: Sequence[str]):
        super().__init__(f"column '{column}' not found; available columns: {', '.join(available)}")
        self.column = column
        self.available = list(available)


class RaggedRowError(IngestionError):
    pass


class VocabularyOverflowError(DataError):
    pass
