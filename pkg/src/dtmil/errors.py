"""Exception types shared across the package."""


class DtmilError(Exception):
    """Base class for all package errors."""


class ConfigError(DtmilError, ValueError):
    """Invalid configuration value (non-positive width, bad proportions, ...)."""


class DimensionError(DtmilError, ValueError):
    """Array shapes do not fit together."""


class ContractError(DtmilError, RuntimeError):
    """A precondition between paired calls was violated (stale cache, empty mask)."""


class DataError(DtmilError, ValueError):
    """Input data is non-finite or otherwise unusable."""


class UndefinedMetricError(DtmilError, ValueError):
    """A metric cannot be computed for the given inputs (e.g. single-class AUC)."""


class ParseError(DtmilError, ValueError):
    """Malformed dataset or checkpoint file."""

    def __init__(self, message, line=None):
        self.line = line
        super().__init__(f"line {line}: {message}" if line is not None else message)


class FormatVersionError(ParseError):
    """File was written with an unsupported format version."""


class TrainingDiverged(DtmilError, RuntimeError):
    """Loss or gradients became non-finite; ``last_good`` holds the last finite parameters."""

    def __init__(self, message, last_good=None):
        self.last_good = last_good
        super().__init__(message)
