"""Exception hierarchy.

Every error carries an ``exit_code`` so the command line layer can map
failures onto its documented exit statuses without a lookup table.
"""


class P2SError(Exception):
    exit_code = 1


class ConfigError(P2SError, ValueError):
    exit_code = 2


class DimensionError(P2SError, ValueError):
    exit_code = 2


class UnsupportedModeError(P2SError, ValueError):
    exit_code = 2


class DegenerateApertureError(P2SError, ValueError):
    exit_code = 2


class SizeGuardError(P2SError, ValueError):
    exit_code = 2


class MemoryBudgetError(P2SError, MemoryError):
    exit_code = 2


class AssetError(P2SError):
    exit_code = 3


class FormatError(AssetError, ValueError):
    exit_code = 3


class UnsupportedVersionError(FormatError):
    exit_code = 3


class NumericalError(P2SError, ArithmeticError):
    exit_code = 4


class NumericalDomainError(NumericalError):
    """Non-finite special-function evaluation for a specific mode pair."""

    def __init__(self, message, pair=None):
        super().__init__(message)
        self.pair = pair


class QuadratureError(NumericalError):
    def __init__(self, message, diagnostics=None):
        super().__init__(message)
        self.diagnostics = diagnostics or {}


class TrainingDivergedError(NumericalError):
    def __init__(self, message, last_stable_epoch):
        super().__init__(message)
        self.last_stable_epoch = last_stable_epoch
