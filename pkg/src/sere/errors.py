"""Shared exception and warning types.

Every validation failure in the library raises a subclass of
:class:`SereError`, so callers (in particular the CLI) can map any
library-level misuse to a single exit path.
"""


class SereError(Exception):
    """Base class for all errors raised by this package."""


class DimensionError(SereError):
    """Array shapes do not line up (wrong width, mismatched layer count, ...)."""


class DomainError(SereError):
    """Numerically invalid input: NaN/inf, negative distance, too few samples."""


class RoutingError(SereError):
    """A routing assignment refers to an expert that does not exist."""


class ConfigError(SereError):
    """A configuration value violates its contract (e.g. top_k > n_experts)."""


class InputError(SereError):
    """Input data is structurally valid but semantically unusable."""


class DegenerateInputWarning(UserWarning):
    """Emitted when a computation falls back to a documented degenerate value."""
