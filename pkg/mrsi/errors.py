"""Exception hierarchy shared by the pipeline and mapped to CLI exit codes."""


class MrsiError(Exception):
    """Base class for every error raised by the toolkit."""

    exit_code = 1


class ConfigError(MrsiError):
    """Experiment configuration is malformed or references unknown keys."""

    exit_code = 2


class DataError(MrsiError, ValueError):
    """Input arrays or on-disk datasets are inconsistent."""

    exit_code = 3


class FormatVersionError(DataError):
    pass


class TruncatedPayloadError(DataError):
    pass


class DimensionMismatchError(DataError):
    pass


class MissingArtifactError(DataError):
    """An upstream pipeline stage has not produced the required dataset."""


class NumericalError(MrsiError, ArithmeticError):
    """A numerical procedure produced an unusable result."""

    exit_code = 4


class NonFiniteError(NumericalError):
    pass


class DivergenceError(NumericalError):
    pass
