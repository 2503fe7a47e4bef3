class NcjtError(Exception):
    """Base class for every error raised by the toolkit."""


class ConfigurationError(NcjtError, ValueError):
    """Invalid scenario config, serving mask, MEC assignment or solver options."""


class StructuralError(NcjtError, ValueError):
    """Dimension mismatch, malformed program or undecodable record."""


class NumericalError(NcjtError, RuntimeError):
    """Factorization breakdown inside the interior-point iteration."""


class InvariantViolation(NcjtError, RuntimeError):
    """An internal invariant that must hold by construction did not."""


class EmptyQueueError(NcjtError, LookupError):
    """The box queue of the branch-reduce-and-bound search is exhausted."""
