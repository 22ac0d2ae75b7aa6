# errors.py
# Exception hierarchy shared by the library, the CLI and the results browser.


class LabError(Exception):
    """Base class for every error raised by gbalab."""


class ConfigError(LabError):
    """Invalid experiment configuration. Carries the dotted field and YAML line when known."""

    def __init__(self, message: str, field: str | None = None, line: int | None = None):
        self.field = field
        self.line = line
        where = ""
        if field:
            where += f" [field: {field}"
            where += f", line {line}]" if line is not None else "]"
        super().__init__(f"{message}{where}")


class SwitchConfigError(ConfigError):
    """Mode switch whose global batch sizes cannot be matched exactly."""

    def __init__(self, message: str, candidates: tuple[int, ...] = ()):
        self.candidates = tuple(candidates)
        if self.candidates:
            message = f"{message} (candidate M values: {', '.join(map(str, self.candidates))})"
        super().__init__(message)


class ArgumentError(LabError, ValueError):
    pass


class ProtocolViolationError(LabError):
    pass


class NumericFaultError(LabError):
    pass


class UndefinedMetricError(LabError):
    pass


class CapViolationError(LabError):
    """Step size outside the range its convergence bound is stated for."""

    def __init__(self, message: str, cap: float | tuple[float, float]):
        self.cap = cap
        super().__init__(message)


class DeadlockError(LabError):
    def __init__(self, message: str, blocked: dict | None = None):
        self.blocked = blocked or {}
        super().__init__(message)


class EndOfStream(LabError):
    """The data list of the current epoch has been fully dispensed."""


class CheckpointError(LabError):
    pass


class CheckpointCorruptError(CheckpointError):
    pass


class CheckpointVersionError(CheckpointError):
    pass


class InvariantError(LabError):
    pass


class LoggingNotEnabledError(LabError):
    """A trace lacks the records an analysis needs."""
