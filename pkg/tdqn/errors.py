from typing import List, Optional


class TdqnError(Exception):
    """Base class for every error raised by the tdqn package."""


class DataError(TdqnError):
    """Market data could not be read, parsed or validated.

    Args:
        message (str): Human readable description.
        line (int, optional): 1-based line number in the source file. Defaults to None.
    """

    def __init__(self, message: str, line: Optional[int] = None):
        self.line = line
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)


class ConfigError(TdqnError):
    """One or more configuration values are invalid.

    Args:
        violations (List[str]): Every problem found, one message each.
    """

    def __init__(self, violations: List[str]):
        self.violations = list(violations)
        super().__init__("invalid configuration:\n  - " + "\n  - ".join(self.violations))


class InvariantViolation(TdqnError):
    """A trading environment safety constraint does not hold after a step."""


class NetworkShapeError(TdqnError):
    """Network inputs or parameters do not match the network spec."""


class TrainingError(TdqnError):
    """Training produced a non-finite loss or gradient.

    Args:
        message (str): Human readable description.
        layer (int, optional): Index of the offending layer. Defaults to None.
    """

    def __init__(self, message: str, layer: Optional[int] = None):
        self.layer = layer
        if layer is not None:
            message = f"layer {layer}: {message}"
        super().__init__(message)


class CheckpointError(TdqnError):
    """A checkpoint file is missing, unreadable or inconsistent."""


class MetricError(TdqnError):
    """A performance indicator was requested on too little data."""
