"""Exception hierarchy shared by every layer of the package."""


class RMARNError(Exception):
    """Base class for all package errors."""


class ConfigError(RMARNError, ValueError):
    """Inconsistent model or run configuration."""


class ArgumentError(RMARNError, ValueError):
    """A caller passed an out-of-domain argument."""


class DimensionError(RMARNError, ValueError):
    """Tensor shapes do not line up."""


class TrainingError(RMARNError, ArithmeticError):
    """Non-finite values appeared during optimisation."""


class DataError(RMARNError):
    """Malformed or missing input data."""


class FeatureFileError(DataError):
    pass


class BadMagicError(FeatureFileError):
    pass


class VersionMismatchError(FeatureFileError):
    pass


class PayloadLengthError(FeatureFileError):
    pass


class NonFiniteError(FeatureFileError):
    pass


class ParseError(DataError):
    """Unparseable text input; carries the 1-based line number."""

    def __init__(self, message, line=None, path=None):
        self.line = line
        self.path = path
        where = ""
        if path is not None:
            where += f"{path}:"
        if line is not None:
            where += f"{line}:"
        super().__init__(f"{where} {message}" if where else message)


class ManifestError(DataError):
    pass


class CheckpointError(RMARNError):
    pass


class CheckpointVersionError(CheckpointError):
    pass


class CorruptCheckpointError(CheckpointError):
    pass


class CheckpointShapeError(CheckpointError):
    pass
