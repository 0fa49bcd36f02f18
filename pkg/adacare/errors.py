# adacare/errors.py
"""Exception hierarchy shared by every AdaCare module."""


class AdaCareError(Exception):
    """Base class for all errors raised by this package."""


class ShapeError(AdaCareError, ValueError):
    """Array shapes do not satisfy an operation's contract."""


class NumericError(AdaCareError, ValueError):
    """Non-finite values where finite ones are required."""


class DataError(AdaCareError, ValueError):
    """Dataset content violates a preprocessing contract."""


class ParseError(DataError):
    """A CSV input could not be parsed."""

    def __init__(self, message, path=None, line=None):
        self.path = str(path) if path is not None else None
        self.line = line
        location = ''
        if self.path is not None:
            location = f"{self.path}:{line}: " if line is not None else f"{self.path}: "
        super().__init__(f"{location}{message}")


class SynthError(DataError):
    """A SynthSpec cannot be realized (e.g. an unreachable prevalence)."""


class MetricError(AdaCareError, ValueError):
    """A metric is undefined for the given scores and labels."""


class TrainingDivergedError(AdaCareError, RuntimeError):
    """The training loss became non-finite."""

    def __init__(self, epoch, batch, loss):
        self.epoch = epoch
        self.batch = batch
        self.loss = loss
        super().__init__(f"Training diverged at epoch {epoch}, batch {batch} (loss={loss})")


class ConfigError(AdaCareError, ValueError):
    """Run configuration is invalid; ``key`` names the offending entry."""

    def __init__(self, message, key=None):
        self.key = key
        super().__init__(f"{key}: {message}" if key else message)


class ArtifactError(AdaCareError, OSError):
    """An artifact file could not be read or written; ``path`` names it."""

    def __init__(self, message, path=None):
        self.path = str(path) if path is not None else None
        super().__init__(f"{self.path}: {message}" if self.path else message)
