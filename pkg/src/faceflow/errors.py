"""Shared exception types.

Invalid arguments raise plain ValueError throughout the package; the classes
here cover the two failure modes that need to survive up to the CLI exit-code
mapping (config -> 2, numeric -> 3).
"""


class ConfigError(ValueError):
    """Bad configuration, scenario, or checkpoint input."""


class ScenarioError(ConfigError):
    """Scenario file could not be parsed or is semantically invalid."""

    def __init__(self, message: str, line: int | None = None, event: int | None = None):
        loc = []
        if line is not None:
            loc.append(f"line {line}")
        if event is not None:
            loc.append(f"event {event}")
        if loc:
            message = f"{message} ({', '.join(loc)})"
        super().__init__(message)
        self.line = line
        self.event = event


class NumericError(RuntimeError):
    """Non-finite values appeared during computation.

    ``where`` carries the failing location (sampler step, block index, or
    training step) for diagnostics.
    """

    def __init__(self, message: str, where: int | None = None):
        super().__init__(message)
        self.where = where
