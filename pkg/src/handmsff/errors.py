"""Exception types shared across the package."""


class HandMsffError(Exception):
    """Base class for all package-specific errors."""


class ContractViolation(HandMsffError):
    """An operation was called with inputs that break its stated precondition."""


class ConfigError(HandMsffError):
    """A configuration value is missing, unknown, or out of range."""


class FormatError(HandMsffError):
    """A file on disk (manifest, image, checkpoint) is missing or malformed."""


class TrainingDiverged(HandMsffError):
    """The training loss became non-finite; carries a diagnostic dump path if one was written."""

    def __init__(self, message: str, dump_path=None):
        super().__init__(message)
        self.dump_path = dump_path
