"""Exception types raised across the toolkit."""


class FGAError(Exception):
    """Base class for every toolkit error."""

    exit_code = 1


class ConfigError(FGAError, ValueError):
    exit_code = 2


class DimensionError(FGAError, ValueError):
    exit_code = 2


class FormatError(FGAError):
    exit_code = 4


class VersionError(FormatError):
    exit_code = 5

    def __init__(self, found, expected):
        super().__init__(f"unsupported version {found} (expected {expected})")
        self.found = found
        self.expected = expected


class MissingFileError(FGAError, FileNotFoundError):
    exit_code = 3


class NumericError(FGAError, ArithmeticError):
    pass


class ConstructionError(FGAError, ValueError):
    pass


class TrainingError(FGAError, RuntimeError):
    def __init__(self, message, epoch=None, step=None):
        where = []
        if epoch is not None:
            where.append(f"epoch {epoch}")
        if step is not None:
            where.append(f"step {step}")
        if where:
            message = f"{message} ({', '.join(where)})"
        super().__init__(message)
        self.epoch = epoch
        self.step = step


class AttackError(FGAError, RuntimeError):
    def __init__(self, message, iteration=None):
        if iteration is not None:
            message = f"{message} at iteration {iteration}"
        super().__init__(message)
        self.iteration = iteration
