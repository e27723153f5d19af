"""Exception hierarchy shared by every module."""


class KVEvictError(Exception):
    """Base class for all errors raised by kvevict."""


class DimensionError(KVEvictError, ValueError):
    """Operand shapes do not line up."""


class DomainError(KVEvictError, ValueError):
    """An argument lies outside the domain of the operation."""


class ConfigError(KVEvictError, ValueError):
    """Invalid configuration or hyperparameter."""


class StateError(KVEvictError, RuntimeError):
    """The object is not in a state that permits the operation."""


class ConstraintViolation(KVEvictError, ValueError):
    """A mask or budget would break the recent-window retention constraint."""


class InfeasibleBudgetError(KVEvictError, ValueError):
    """The requested budget cannot satisfy the window floor or capacity."""


class FeasibilityError(KVEvictError, ValueError):
    """An exhaustive search was requested on an instance above the enumeration cap."""
