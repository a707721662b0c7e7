"""Exception types shared across the package.

The CLI maps these onto its exit-code contract (config 2, data 3,
numeric 4), so library code should raise the most specific one that
applies instead of bare ValueError/RuntimeError.
"""


class DgcrfError(Exception):
    """Base class for all package errors."""


class ParameterError(DgcrfError, ValueError):
    """An argument violates an operation's precondition."""


class DataError(DgcrfError):
    """Input data (files, directories, corpora) is missing or invalid."""


class ImageFormatError(DataError):
    """An image file could not be parsed as PGM P5 or PNG-8 grayscale."""


class ModelFormatError(DataError):
    """A model file failed magic/version/size/finiteness validation."""


class NumericError(DgcrfError):
    """A factorization failed or a computation produced non-finite values."""


class ContractError(DgcrfError):
    """Internal state mismatch, e.g. a backprop cache from a different forward."""


class ConfigError(DgcrfError):
    """A config file or command-line flag is malformed or inconsistent."""
