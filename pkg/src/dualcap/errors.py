"""Exception types shared across the package.

Every failure mode maps to one of these so callers (and the CLI) can
translate errors into exit codes without string matching.
"""


class DualcapError(Exception):
    """Base class for all package errors."""


class ShapeError(DualcapError, ValueError):
    """An operation received tensors with incompatible shapes."""


class ConfigError(DualcapError, ValueError):
    """A configuration value is missing, unknown, or inconsistent."""


class ContractError(DualcapError, ValueError):
    """A documented precondition of an operation was violated."""


class VocabError(DualcapError, ValueError):
    """A token id or vocabulary file is invalid."""


class DataError(DualcapError, ValueError):
    """An image or caption file is missing or malformed."""


class IntegrityError(DualcapError, ValueError):
    """A checkpoint file is corrupt or inconsistent with its manifest."""
