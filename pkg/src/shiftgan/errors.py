class ContractError(ValueError):
    """An operation was called outside its precondition."""


class FormatError(ValueError):
    """A file does not follow the expected on-disk layout."""


class ConfigError(ValueError):
    """A training or evaluation configuration is inconsistent."""


class TrainingDiverged(RuntimeError):
    """A loss became non-finite during training."""

    def __init__(self, message, snapshot=None):
        super().__init__(message)
        self.snapshot = snapshot
