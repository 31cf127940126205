"""Exception hierarchy shared by all pipeline stages.

Each class carries the CLI exit code it maps to.
"""


class RobustMorphError(Exception):
    exit_code = 1


class ConfigError(RobustMorphError, ValueError):
    exit_code = 2


class ValidationError(RobustMorphError, ValueError):
    exit_code = 2


class ShapeError(ValidationError):
    pass


class GenerationError(RobustMorphError):
    exit_code = 2


class StateError(RobustMorphError, RuntimeError):
    exit_code = 3


class PreconditionError(RobustMorphError):
    exit_code = 3


class NumericError(RobustMorphError, ArithmeticError):
    exit_code = 4
