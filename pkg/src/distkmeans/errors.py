"""Exception types shared across the package."""


class InputError(ValueError):
    """Invalid user-supplied data or parameters."""


class ProtocolError(RuntimeError):
    """A protocol invariant broke at run time (consensus anomaly, bad weights)."""
