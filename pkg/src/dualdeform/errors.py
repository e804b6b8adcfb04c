"""Exception hierarchy shared across the package.

The CLI maps these onto exit codes, so every error raised on purpose
should derive from ``DualDeformError``.
"""


class DualDeformError(Exception):
    exit_code = 1


class ShapeError(DualDeformError, ValueError):
    exit_code = 3


class SizeError(ShapeError):
    pass


class DomainError(DualDeformError, ValueError):
    exit_code = 4


class StateError(DualDeformError, RuntimeError):
    exit_code = 4


class ConfigError(DualDeformError, ValueError):
    exit_code = 2


class InputError(DualDeformError, FileNotFoundError):
    exit_code = 3


class FormatError(DualDeformError, ValueError):
    exit_code = 3


class RangeError(DualDeformError, ValueError):
    exit_code = 2
