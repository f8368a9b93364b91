"""Exception hierarchy shared by every module of the package."""


class HSCRFError(Exception):
    """Base class for all package errors."""


class TopologyError(HSCRFError, ValueError):
    """The state hierarchy is malformed."""

    def __init__(self, message, level=None, state=None):
        super().__init__(message)
        self.level = level
        self.state = state


class EmptyChildSet(TopologyError):
    pass


class OrphanState(TopologyError):
    pass


class BadBounds(TopologyError):
    pass


class DimensionMismatch(HSCRFError, ValueError):
    pass


class UnknownFeatureId(HSCRFError, KeyError):
    pass


class NonFiniteWeight(HSCRFError, ValueError):
    pass


class InsideNotComputed(HSCRFError, RuntimeError):
    pass


class MassesMissing(HSCRFError, RuntimeError):
    pass


class CorruptBookkeeper(HSCRFError, RuntimeError):
    pass


class InconsistentLabels(HSCRFError, ValueError):
    """Labels directly violate the hierarchical constraints.

    ``coords`` holds the offending ``(level, time)`` pairs (0-based).
    """

    def __init__(self, message, coords=()):
        super().__init__(message)
        self.coords = tuple(coords)


class NoConsistentConfiguration(HSCRFError, RuntimeError):
    pass


class ZeroColumn(HSCRFError, FloatingPointError):
    def __init__(self, message, column=None):
        super().__init__(message)
        self.column = column


class ScaleMismatch(HSCRFError, ValueError):
    pass


class EmptyDataset(HSCRFError, ValueError):
    pass


class BudgetExceeded(HSCRFError, RuntimeError):
    def __init__(self, message, count=None, budget=None):
        super().__init__(message)
        self.count = count
        self.budget = budget


class ParseError(HSCRFError, ValueError):
    """Malformed input file; ``line`` is 1-based."""

    def __init__(self, message, path=None, line=None):
        where = f"{path or '<input>'}:{line}: " if line is not None else ""
        super().__init__(where + message)
        self.path = path
        self.line = line
