"""Exception hierarchy shared by all reenact modules."""


class ReenactError(Exception):
    """Base class for every error raised by the toolkit."""


class InvalidInputError(ReenactError, ValueError):
    pass


class UnsupportedRateError(InvalidInputError):
    pass


class StateError(ReenactError):
    """An object is in the wrong state for the requested operation
    (e.g. standardizing an already standardized spectrogram)."""


class AlignmentError(ReenactError, ValueError):
    pass


class VocabularyError(ReenactError, KeyError):
    def __str__(self):
        return Exception.__str__(self)


class InsufficientDataError(ReenactError, ValueError):
    pass


class InputTooShortError(InvalidInputError):
    pass


class InvalidStatsError(InvalidInputError):
    pass


class ConfigurationError(ReenactError):
    pass


class RegimeError(ConfigurationError):
    pass


class DependencyError(ReenactError):
    """A pipeline stage was started before the artifacts it consumes exist."""
