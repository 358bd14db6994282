"""Exception hierarchy shared by every module.

Each class carries a ``category`` used by the command-line front end to emit a
one-line, machine-parsable error category.
"""


class UrbanSTError(Exception):
    category = "Error"


class FormatError(UrbanSTError):
    category = "FormatError"


class DataError(UrbanSTError):
    category = "DataError"


class ResampleError(UrbanSTError):
    category = "ResampleError"


class EmptyDatasetError(UrbanSTError):
    category = "EmptyDatasetError"


class CoordError(UrbanSTError):
    category = "CoordError"


class DegenerateGraphError(UrbanSTError):
    category = "DegenerateGraphError"


class WindowError(UrbanSTError):
    category = "WindowError"


class ShapeError(UrbanSTError):
    category = "ShapeError"


class AttentionMaskError(UrbanSTError):
    category = "AttentionMaskError"


class ConfigError(UrbanSTError):
    category = "ConfigError"


class RevinError(UrbanSTError):
    category = "RevinError"


class SplitError(UrbanSTError):
    category = "SplitError"


class DivergenceError(UrbanSTError):
    category = "DivergenceError"

    def __init__(self, step: int, message: str = ""):
        self.step = step
        super().__init__(message or f"non-finite loss at step {step}")


class EvalError(UrbanSTError):
    category = "EvalError"


class ImputeError(UrbanSTError):
    category = "ImputeError"

    def __init__(self, offenders, message: str = ""):
        self.offenders = list(offenders)
        super().__init__(message or f"fully missing node/channel slices: {self.offenders}")
