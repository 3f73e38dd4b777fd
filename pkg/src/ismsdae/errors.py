"""Exception hierarchy shared by every stage of the pipeline."""


class IsmError(Exception):
    """Base class for all package errors."""


class ParameterError(IsmError, ValueError):
    """An argument violates an operation's preconditions."""


class DegenerateInputError(IsmError, ValueError):
    """Input has no usable content, e.g. zero signal power."""


class FormatError(IsmError):
    """A file on disk is truncated, corrupted or of the wrong version."""


class DatasetBuildError(IsmError):
    """Not enough source material to build the requested dataset."""

    def __init__(self, message, protocol=None):
        super().__init__(message)
        self.protocol = protocol


class TrainingDivergenceError(IsmError):
    """Loss became non-finite during training."""

    def __init__(self, message, epoch, stage=None):
        super().__init__(message)
        self.epoch = epoch
        self.stage = stage
