"""Exception hierarchy shared by all prunekit modules.

The CLI maps these onto its exit-code contract, so new error conditions
should reuse one of the classes below instead of raising bare ValueError.
"""


class PrunekitError(Exception):
    """Base class for all errors raised by this package."""


class ShapeError(PrunekitError):
    """Operands have incompatible or invalid dimensions."""


class ValidationError(PrunekitError):
    """An input violates a documented precondition (bad mask, bad id, ...)."""


class FormatError(PrunekitError):
    """A file is not a valid tensor container (bad magic, version, header)."""


class CorruptionError(FormatError):
    """A tensor container is structurally valid but truncated or inconsistent."""


class NumericError(PrunekitError):
    """A computation produced non-finite values or a solver failed."""
