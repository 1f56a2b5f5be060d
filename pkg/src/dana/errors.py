"""Exception types raised across the package."""


class DanaError(Exception):
    """Base class for all package errors."""


class DimensionError(DanaError, ValueError):
    """Operand shapes are incompatible."""


class NumericError(DanaError, ArithmeticError):
    """A non-finite value showed up where finite numbers are required."""


class ModeError(DanaError, ValueError):
    """An operation was called on a graph or model of the wrong kind."""


class ConfigError(DanaError, ValueError):
    """Invalid training or model configuration."""


class ValidationError(DanaError, ValueError):
    """Input data violates a documented precondition."""


class ParseError(DanaError, ValueError):
    """A text input file is malformed."""

    def __init__(self, path, lineno, message):
        self.path = str(path)
        self.lineno = lineno
        super().__init__(f"{path}:{lineno}: {message}")


class UnknownIdError(DanaError, KeyError):
    """An anchor file references a vertex id missing from the graph."""

    def __init__(self, path, lineno, vertex_id, network):
        self.path = str(path)
        self.lineno = lineno
        self.vertex_id = vertex_id
        self.network = network
        super().__init__(f"{path}:{lineno}: unknown id {vertex_id!r} in network {network}")

    def __str__(self):
        return self.args[0]
