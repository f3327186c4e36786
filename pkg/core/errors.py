"""
Exception hierarchy shared by every service.

Each family carries the exit code the CLI maps it to, so `cli.dispatch`
never has to know about individual error types.
"""


class OmniTalkError(Exception):
    exit_code = 1


# --- Validation (exit 4) ---

class ValidationError(OmniTalkError, ValueError):
    exit_code = 4


class AngleRangeError(ValidationError):
    pass


class SeparationError(ValidationError):
    pass


class SampleRateMismatchError(ValidationError):
    pass


class EmptySignalError(ValidationError):
    pass


class SilentSignalError(ValidationError):
    pass


class ShapeMismatchError(ValidationError):
    pass


class ConfigError(ValidationError):
    pass


class IndistinguishableBankError(ValidationError):
    pass


class SymmetryError(ValidationError):
    pass


class CountMismatchError(ValidationError):
    pass


class MissingFieldError(ValidationError):
    pass


# --- Storage (exit 3) ---

class StorageError(OmniTalkError, OSError):
    exit_code = 3


class FormatError(StorageError):
    pass


class VersionMismatchError(FormatError):
    pass


class TruncatedFileError(FormatError):
    pass


class ChecksumError(FormatError):
    pass


# --- Training ---

class TrainingDivergedError(OmniTalkError):
    def __init__(self, message: str, epoch: int = None, batch: int = None):
        super().__init__(message)
        self.epoch = epoch
        self.batch = batch
