"""
Error types shared by every module.

Each error also derives from the nearest builtin so callers that catch
ValueError / RuntimeError keep working.
"""


class DetailerError(Exception):
    pass


class ShapeError(DetailerError, ValueError):
    pass


class ArgumentError(DetailerError, ValueError):
    pass


class DataError(DetailerError, ValueError):
    pass


class ContractError(DetailerError, ValueError):
    pass


class ConfigError(DetailerError, ValueError):
    pass


class CheckpointError(DetailerError, ValueError):
    pass


class TrainingError(DetailerError, RuntimeError):
    pass


class EvaluationError(DetailerError, RuntimeError):
    pass


class ParseError(DetailerError, ValueError):
    """Malformed file. Carries the filename and the byte offset of the fault."""

    def __init__(self, filename, offset: int, message: str) -> None:
        self.filename = str(filename)
        self.offset = offset
        super().__init__(f"{self.filename}: byte {offset}: {message}")
