"""Exception hierarchy shared by all modules."""


class FolmetError(Exception):
    """Base class for library errors."""


class InputError(FolmetError, ValueError):
    """Malformed or non-finite input."""


class DomainError(FolmetError, ValueError):
    """Argument outside the domain where a quantity is defined."""


class SequenceInvariantError(FolmetError):
    """A domain sequence violates one of its declared invariants."""


class UndefinedDistanceError(FolmetError, ValueError):
    """Distance requested between empty point sets."""
