"""Exception hierarchy shared by every stage of the engine."""


class ElasticError(Exception):
    """Base class for all engine errors."""


class ShapeError(ElasticError, ValueError):
    """Operand dimensions are incompatible."""


class NumericError(ElasticError, ArithmeticError):
    """A non-finite value entered an operation."""


class DomainError(ElasticError, ValueError):
    """An input lies outside the operation's domain (e.g. negative probability)."""


class ContractError(ElasticError):
    """A precondition or postcondition of an operation was violated."""


class StructureError(ElasticError, KeyError):
    """An unknown or invalid sub-structure was requested."""

    def __str__(self):
        # KeyError quotes its message; keep it readable.
        return str(self.args[0]) if self.args else ""


class ConfigError(ElasticError, ValueError):
    """A configuration is internally inconsistent."""


class CheckpointError(ElasticError, OSError):
    """A stored file is damaged or of an unknown version."""
