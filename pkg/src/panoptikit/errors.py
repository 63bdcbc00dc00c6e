"""Exception hierarchy shared across the toolkit.

The CLI maps these onto exit codes: any ``ToolkitError`` raised while reading
or validating user input exits 1; ``InvariantError`` (an internal consistency
failure) exits 2.
"""

from __future__ import annotations

__all__ = [
    "ToolkitError",
    "ShapeError",
    "DataError",
    "FormatError",
    "ConfigError",
    "DegenerateBoxError",
    "InvariantError",
]


class ToolkitError(Exception):
    """Base class for every error raised by panoptikit."""


class ShapeError(ToolkitError):
    """Array dimensions do not satisfy an operation's contract."""

    def __init__(self, message: str, *, expected=None, actual=None):
        parts = [message]
        if expected is not None:
            parts.append(f"expected dims {tuple(expected)}")
        if actual is not None:
            parts.append(f"actual dims {tuple(actual)}")
        super().__init__("; ".join(parts))
        self.expected = tuple(expected) if expected is not None else None
        self.actual = tuple(actual) if actual is not None else None


class DataError(ToolkitError):
    """Values are structurally well-formed but semantically invalid."""


class FormatError(ToolkitError):
    """A file or byte stream does not follow its documented format."""

    def __init__(self, message: str, *, path=None, line: int | None = None):
        loc = ""
        if path is not None:
            loc = str(path)
        if line is not None:
            loc = f"{loc}:{line}" if loc else f"line {line}"
        super().__init__(f"{loc}: {message}" if loc else message)
        self.path = str(path) if path is not None else None
        self.line = line


class ConfigError(ToolkitError):
    """Invalid class registry, layer description, or option combination."""


class DegenerateBoxError(DataError):
    """A bounding box collapses to <= 1 pixel on a side after clamping."""


class InvariantError(ToolkitError):
    """An internal invariant was violated; indicates a bug, not bad input."""
