"""Exception taxonomy shared across the package.

Each class maps to one failure domain so the CLI can translate them into
distinct exit codes.
"""


class AnopromptError(Exception):
    """Base class for all package errors."""


class ConfigError(AnopromptError):
    """Invalid configuration: bad schema keys, dimension mismatches, bounds."""


class TokenizerError(ConfigError):
    """A word or template could not be tokenized with the active vocabulary."""


class InputError(AnopromptError):
    """A runtime argument violates an operation precondition."""


class StateError(AnopromptError):
    """An object is used before it was put into the required state."""


class IngestionError(AnopromptError):
    """Dataset discovery or decoding failed; message names the path."""


class MetricError(AnopromptError):
    """A metric is undefined for the given inputs (e.g. single-class labels)."""
