"""Exception hierarchy shared by every module.

Each class carries the CLI exit code it maps to so the command layer does
not need a lookup table.
"""


class WmPipeError(Exception):
    exit_code = 1


class InvalidArgument(WmPipeError, ValueError):
    exit_code = 2


class ConfigurationError(WmPipeError):
    exit_code = 2


class InvalidConfig(ConfigurationError):
    """Simulator configuration cannot produce a run."""


class ParseError(ConfigurationError):
    def __init__(self, message, line=None, column=None):
        if line is not None:
            message = f"{message} (line {line}, column {column})"
        super().__init__(message)
        self.line = line
        self.column = column


class SchemaError(ConfigurationError):
    def __init__(self, message, path=""):
        super().__init__(f"{path}: {message}" if path else message)
        self.path = path


class FitError(WmPipeError):
    exit_code = 2


class NoFeasibleSplit(WmPipeError):
    exit_code = 3


class InsufficientData(WmPipeError):
    exit_code = 2


class UnknownAction(WmPipeError, KeyError):
    exit_code = 2

    def __str__(self):
        return str(self.args[0]) if self.args else "unknown action"


class InvalidState(WmPipeError):
    exit_code = 2


class GraphError(WmPipeError):
    exit_code = 2


class PlanError(WmPipeError):
    exit_code = 2


class InfeasibleFusion(WmPipeError):
    exit_code = 3


class EquivalenceFailure(WmPipeError):
    exit_code = 4

    def __init__(self, message, worst_index=None, worst_error=None):
        super().__init__(message)
        self.worst_index = worst_index
        self.worst_error = worst_error
