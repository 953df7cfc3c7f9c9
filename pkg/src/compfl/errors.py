"""Exception types raised across the package."""


class InvalidArgumentError(ValueError):
    pass


class UnsupportedRegularizerError(ValueError):
    pass


class ConvergenceError(RuntimeError):
    pass


class StepSizeError(RuntimeError):
    pass


class ScheduleError(ValueError):
    pass


class ConfigError(ValueError):
    """Configuration failed validation.

    ``field``, ``expected`` and ``got`` locate the offending entry.
    """

    def __init__(self, field, expected, got):
        self.field = field
        self.expected = expected
        self.got = got
        super().__init__(f"config field {field!r}: expected {expected}, got {got!r}")


class ParseError(ValueError):
    """A data file is malformed.

    Exactly one of ``offset`` (binary files) or ``line`` (text files) is set.
    """

    def __init__(self, message, *, offset=None, line=None, path=None):
        self.offset = offset
        self.line = line
        self.path = path
        where = f"byte offset {offset}" if offset is not None else f"line {line}"
        prefix = f"{path}: " if path is not None else ""
        super().__init__(f"{prefix}parse error at {where}: {message}")


class DivergenceError(RuntimeError):
    """A local iterate became non-finite."""

    def __init__(self, client, round, step, algorithm="proposed"):
        self.client = client
        self.round = round
        self.step = step
        self.algorithm = algorithm
        super().__init__(
            f"{algorithm}: non-finite iterate at client {client}, round {round}, local step {step}"
        )


class MissingSnapshotsError(RuntimeError):
    pass
