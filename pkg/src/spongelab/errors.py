"""Exception hierarchy shared by every module.

Each class carries the CLI exit code it maps to, so the command line front
end can translate failures without a lookup table.
"""


class SpongeError(Exception):
    exit_code = 2


class ShapeError(SpongeError, ValueError):
    exit_code = 2


class DataError(SpongeError, ValueError):
    exit_code = 2


class FormatError(SpongeError, ValueError):
    """Corrupt or unsupported file. ``offset`` is the byte position, if known."""

    exit_code = 2

    def __init__(self, message, path=None, offset=None):
        self.path = path
        self.offset = offset
        parts = [message]
        if path is not None:
            parts.append(f"file={path}")
        if offset is not None:
            parts.append(f"offset={offset}")
        super().__init__(" ".join(parts))


class ConfigError(SpongeError, ValueError):
    exit_code = 1


class SpecError(ConfigError):
    """Invalid architecture description."""


class StateError(SpongeError, RuntimeError):
    exit_code = 2


class NumericError(SpongeError, ArithmeticError):
    """Non-finite value during optimisation. ``iterate`` holds the offending point."""

    exit_code = 3

    def __init__(self, message, iterate=None):
        self.iterate = iterate
        super().__init__(message)
