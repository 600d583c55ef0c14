"""Exception types shared across the package."""


class StyleAugError(Exception):
    """Base class for all package errors."""


class InvalidInputError(StyleAugError, ValueError):
    """A caller-supplied value violates an operation's preconditions."""


class NumericError(StyleAugError, ArithmeticError):
    """A numerical routine failed (non-finite loss, factorization failure, ...)."""


class ConfigError(StyleAugError, ValueError):
    """A configuration file or config object is malformed.

    When raised while parsing a config file, the message carries
    ``file:line`` coordinates.
    """


class WeightArchiveError(StyleAugError, ValueError):
    """A weight archive is missing, inconsistent, or corrupted.

    Messages name the offending tensor whenever one can be identified.
    """
