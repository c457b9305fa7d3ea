"""Error hierarchy shared by every module of the simulator."""

from typing import Optional


class UntwinError(Exception):
    """Root of all simulator errors."""


class InvalidInput(UntwinError, ValueError):
    """An operation received arguments outside its contract."""


class NothingRemains(UntwinError):
    """Excluding the requested NDTs would leave no participant."""


class OverBudget(UntwinError):
    """Checkpoint budget cannot be met because of protected checkpoints."""


class InsufficientSamples(UntwinError, ValueError):
    """A statistical probe was asked to run on too few seeds."""


class StateError(UntwinError):
    """Artifacts required by a command are missing or inconsistent."""


class ConfigError(UntwinError, ValueError):
    """Configuration file could not be parsed or validated.

    Args:
        message: What went wrong
        key: Dotted path of the offending key, if known
        line: 1-based line number in the config file, if known
    """

    def __init__(self, message: str, key: Optional[str] = None, line: Optional[int] = None):
        self.message = message
        self.key = key
        self.line = line
        location = []
        if line is not None:
            location.append(f"line {line}")
        if key is not None:
            location.append(f"key '{key}'")
        prefix = f"[{', '.join(location)}] " if location else ""
        super().__init__(f"{prefix}{message}")
