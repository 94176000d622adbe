"""Exception hierarchy shared by all stainforge modules.

The four base categories map 1:1 onto CLI exit codes; everything raised by
the library derives from one of them so the CLI can report a single
machine-readable category line.
"""


class StainforgeError(Exception):
    exit_code = 1
    category = "Error"


class ConfigError(StainforgeError):
    exit_code = 2
    category = "ConfigError"


class DataError(StainforgeError):
    exit_code = 3
    category = "DataError"


class TrainingError(StainforgeError):
    exit_code = 4
    category = "TrainingError"


class IoError(StainforgeError):
    exit_code = 5
    category = "IoError"


class EmptySetError(DataError):
    pass


class EmptyDatasetError(DataError):
    pass


class EmptyReportError(DataError):
    pass


class BinMismatchError(DataError):
    pass


class ShapeMismatchError(DataError):
    pass


class PairingError(DataError):
    pass


class BasisNotFittedError(DataError):
    pass


class DivergenceError(TrainingError):
    pass


class NonFiniteGradientError(TrainingError):
    pass


class NonFiniteUpdateError(TrainingError):
    pass


class FormatError(IoError):
    pass


class VersionError(IoError):
    pass
