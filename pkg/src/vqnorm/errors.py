"""Exception types shared across the package."""

from .ndgrad.tensor import NumericError, ShapeError


class ConfigError(ValueError):
    """Inconsistent configuration or mismatched checkpoints."""


class ContractError(ValueError):
    """A precondition on the inputs does not hold (empty cohort, single class, ...)."""


class MissingPrerequisite(FileNotFoundError):
    """A pipeline stage needs an artifact that an earlier stage has not produced."""


class IntegrityError(ValueError):
    """A persisted file is truncated, corrupted or of an unknown version."""


__all__ = ["ConfigError", "ContractError", "IntegrityError", "MissingPrerequisite",
           "NumericError", "ShapeError"]
