"""Exception hierarchy shared across the package.

CLI exit-code mapping: InputError (and subclasses) -> 1, ConfigError -> 2,
NumericError -> 3.
"""


class MedembedError(Exception):
    pass


class InputError(MedembedError):
    """Bad data handed to an operation: malformed rows, empty splits, etc."""


class DimensionError(InputError):
    """Tensor shapes do not conform for the requested op."""


class ParseError(InputError):
    """A raw file could not be parsed; message names file and line."""


class MetricError(InputError):
    """A metric is undefined for the given inputs (e.g. no positives)."""


class VocabularyError(InputError):
    """Unknown code or token at a point where the vocabulary is closed."""


class ConfigError(MedembedError):
    """Invalid or inconsistent configuration."""


class NumericError(MedembedError):
    """Non-finite value produced where finiteness is required."""


class ContractError(MedembedError):
    """An internal precondition was violated by the caller."""
