"""Exception types shared across the package."""


class ProtoreportError(Exception):
    """Base class for all package-specific errors."""


class ParseError(ProtoreportError):
    """A document could not be parsed into the expected structure."""


class ValidationError(ProtoreportError):
    """A parsed object violates a structural invariant."""


class UnknownIdError(ProtoreportError):
    """A referenced question or option id does not exist in the template."""


class ExpanderUnavailableError(ProtoreportError):
    """The phrase-expansion provider failed; callers degrade to canonical-only."""


class ExtractorUnavailableError(ProtoreportError):
    """The constrained-answer provider failed for a study."""


class AlignmentError(ProtoreportError):
    """Predicted and gold collections do not cover the same study ids."""


class ConfigError(ProtoreportError):
    """A configuration value is missing, malformed, or out of range."""


class DimensionMismatchError(ProtoreportError):
    """Vector or matrix shapes do not line up."""


class EmptyInputError(ProtoreportError):
    """An operation that needs at least one element received none."""


class EmptyMaskError(ProtoreportError):
    """A loss was requested over a mask with no active positions."""


class NonFiniteGradientError(ProtoreportError):
    """A gradient contains NaN or infinity; the training step must abort."""
