class PolyhexError(Exception):
    """Base class for pipeline failures that carry a user-facing message."""


class DataError(PolyhexError, ValueError):
    """Malformed or inconsistent input data (parse errors, bad files)."""

    def __init__(self, message: str, path=None, line: int | None = None):
        loc = ""
        if path is not None:
            loc = f"{path}:{line}: " if line is not None else f"{path}: "
        super().__init__(loc + message)
        self.path = path
        self.line = line


class ValidityError(PolyhexError):
    """Geometric or numeric validity failure (open boundary, inverted cells, ...)."""
