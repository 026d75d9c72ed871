"""Exception hierarchy.

Each error carries a ``category`` that the command-line front end maps to an
exit code: argument problems, data problems and numerical failures.
"""


class PtychoError(Exception):
    category = "data"


class InvalidArgumentError(PtychoError, ValueError):
    category = "argument"


class GraphConstructionError(PtychoError):
    category = "argument"


class TapeConsistencyError(PtychoError):
    category = "numerical"


class NumericalFailureError(PtychoError, FloatingPointError):
    category = "numerical"

    def __init__(self, message, node=None):
        super().__init__(message)
        self.node = node


class UndefinedMetricError(PtychoError):
    category = "numerical"


class BandLimitError(PtychoError):
    category = "argument"


class ScanRangeError(PtychoError):
    category = "data"

    def __init__(self, message, shot=None):
        super().__init__(message)
        self.shot = shot


class DivergenceError(NumericalFailureError):
    pass


class GeometryError(InvalidArgumentError):
    pass


class PreprocessingError(PtychoError):
    category = "data"


class SamplingError(InvalidArgumentError):
    pass


class ClusteringError(PtychoError):
    category = "numerical"


class CorruptContainerError(PtychoError):
    category = "data"

    def __init__(self, message, field=None):
        super().__init__(message)
        self.field = field
