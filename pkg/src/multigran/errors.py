"""Exception types shared across the package."""

from __future__ import annotations


class ShapeError(ValueError):
    """An array or grid does not have the shape an operation requires."""


class NonFiniteError(FloatingPointError):
    """A computation produced NaN or inf.

    ``index`` is the offending coordinate (finite differences) or the
    optimisation step (inversion, training) where it happened.
    """

    def __init__(self, message: str, index: int | None = None):
        super().__init__(message)
        self.index = index


class ConfigError(ValueError):
    """A configuration value is out of range or inconsistent."""


class InfeasiblePlanError(ValueError):
    """A reduction plan asks for more tokens than a bundle holds."""

    def __init__(self, message: str, available: dict, requested: dict):
        super().__init__(f"{message}: available={available} requested={requested}")
        self.available = available
        self.requested = requested


class DivergenceError(RuntimeError):
    """Training loss blew up past the allowed multiple of its initial value."""

    def __init__(self, message: str, diagnostics: dict):
        super().__init__(f"{message} ({diagnostics})")
        self.diagnostics = diagnostics


class FormatError(ValueError):
    """A serialized file is truncated, corrupted, or of an unknown version.

    ``kind`` is one of ``"magic"``, ``"version"``, ``"truncated"``,
    ``"checksum"``, ``"malformed"``.
    """

    def __init__(self, kind: str, message: str, path=None):
        where = f" [{path}]" if path is not None else ""
        super().__init__(f"{kind}: {message}{where}")
        self.kind = kind
        self.path = path
