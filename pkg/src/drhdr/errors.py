"""Exception types shared across the package."""


class NumericError(RuntimeError):
    """A non-finite value appeared where the pipeline forbids it."""


class DataError(RuntimeError):
    """A file or dataset is missing, malformed, or inconsistent."""
