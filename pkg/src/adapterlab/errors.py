"""Exception types shared across the package."""


class DimensionError(ValueError):
    """Operand shapes are incompatible for the requested operation."""


class ConfigurationError(ValueError):
    """A configuration value is invalid (indivisible groups, bad budget, ...)."""


class NonFiniteError(ArithmeticError):
    """An operation produced NaN or Inf; raised instead of propagating."""


class ContractError(ValueError):
    """An operation was called outside its contract (e.g. non-scalar loss)."""


class ConstraintError(ValueError):
    """A design point violates a design-space constraint."""


class GroupingError(ValueError):
    """An ANOVA grouping is degenerate (k < 2, empty group, N <= k)."""


class VocabularyError(KeyError):
    """A prompt contains a word outside the fixed vocabulary."""


class DataError(ValueError):
    """Run records are missing a required field."""
