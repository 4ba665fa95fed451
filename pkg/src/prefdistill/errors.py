"""Exception hierarchy shared across the package."""


class PrefDistillError(Exception):
    """Base class for all package errors."""


# embedding store
class ZeroVector(PrefDistillError, ValueError):
    pass


class DimensionMismatch(PrefDistillError, ValueError):
    pass


class EmptyCatalog(PrefDistillError, ValueError):
    pass


class BadMagic(PrefDistillError, ValueError):
    pass


class TruncatedFile(PrefDistillError, ValueError):
    pass


class DuplicateId(PrefDistillError, ValueError):
    pass


class UnknownId(PrefDistillError, KeyError):
    def __str__(self):
        return Exception.__str__(self)


# bt-loss
class InvalidPermutation(PrefDistillError, ValueError):
    pass


# optimizer
class ShapeMismatch(PrefDistillError, ValueError):
    pass


class PrematureStep(PrefDistillError, RuntimeError):
    pass


# teacher
class TeacherError(PrefDistillError):
    pass


class TeacherUnavailable(TeacherError):
    pass


class MalformedResponse(TeacherError):
    def __init__(self, message, raw_response=None):
        super().__init__(message)
        self.raw_response = raw_response


class CacheCorrupt(PrefDistillError):
    pass


# sampler
class CatalogTooSmall(PrefDistillError, ValueError):
    pass


# tournament
class TournamentInterrupted(TeacherError):
    """A teacher failure mid-bracket; ``bracket`` holds the matches played so far."""

    def __init__(self, message, bracket, cause=None):
        super().__init__(message)
        self.bracket = bracket
        self.cause = cause


# evalmetrics
class KOutOfRange(PrefDistillError, ValueError):
    pass


class UnknownWinner(PrefDistillError, KeyError):
    def __str__(self):
        return Exception.__str__(self)


# pipeline
class ConfigError(PrefDistillError, ValueError):
    pass


class ResumableAbort(PrefDistillError):
    """Training stopped mid-run; the last checkpoint is consistent and can be resumed."""
