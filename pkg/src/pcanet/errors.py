"""Exception hierarchy shared by all pcanet modules."""


class PCANetError(Exception):
    """Base class for every error raised by this package."""


class InvalidInputError(PCANetError, ValueError):
    """Input data violates an operation's preconditions."""


class InvalidConfigError(PCANetError, ValueError):
    """A configuration value is out of range or inconsistent."""


class InvalidStateError(PCANetError, RuntimeError):
    """An object is not in a state that allows the requested operation."""


class RankDeficiencyError(PCANetError, ValueError):
    """Patch covariance has fewer usable directions than filters requested."""

    def __init__(self, message, achievable):
        super().__init__(message)
        self.achievable = achievable


class DataIntegrityError(PCANetError):
    """A file on disk is malformed, truncated or fails its checksum."""


class BadMagicError(DataIntegrityError):
    pass


class TruncatedFileError(DataIntegrityError):
    pass


class ChecksumError(DataIntegrityError):
    pass


class UnsupportedVersionError(DataIntegrityError):
    pass


class CountMismatchError(DataIntegrityError):
    pass


class DatasetError(PCANetError):
    """Dataset manifest problems. ``problems`` lists one message per bad line."""

    def __init__(self, message, problems=()):
        super().__init__(message)
        self.problems = list(problems)
