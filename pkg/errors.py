"""
Exception hierarchy for the BCNN library and CLI.
Every error carries the process exit code the CLI reports for it.
"""


class BCNNError(Exception):
    exit_code = 1


class ShapeError(BCNNError, ValueError):
    """Shape, length or channel-count mismatch"""


class SizeError(ShapeError):
    """Empty input where at least one element is required"""


class DomainError(BCNNError, ValueError):
    """Non-finite values, or non-±1 values on a binary path"""


class StateError(BCNNError, RuntimeError):
    """Backward called without a forward cache"""


class ConfigError(BCNNError, ValueError):
    exit_code = 1


class DataError(BCNNError):
    exit_code = 2


class FormatError(DataError):
    """Packed model file is corrupt, truncated or of an unknown version"""


class NonConvergenceError(BCNNError, ArithmeticError):
    exit_code = 3


class KernelMismatchError(BCNNError, ArithmeticError):
    """Packed kernel disagrees with the float oracle"""
