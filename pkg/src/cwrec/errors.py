"""Exception hierarchy shared by every cwrec module."""


class CWRecError(Exception):
    """Base class; ``tag`` is the machine-parsable code the CLI prints."""

    tag = "ERROR"


class ConfigError(CWRecError, ValueError):
    tag = "CONFIG_INVALID"


class DataError(CWRecError, ValueError):
    tag = "DATA_EMPTY"


class MalformedLine(DataError):
    def __init__(self, line_no: int, detail: str = ""):
        self.line_no = line_no
        msg = f"malformed line {line_no}"
        super().__init__(f"{msg}: {detail}" if detail else msg)


class EmptyInput(DataError):
    pass


class EmptyAfterFilter(DataError):
    pass


class InvalidConstant(ConfigError):
    pass


class InvalidPrior(DataError):
    pass


class DimensionMismatch(CWRecError, ValueError):
    pass


class ZeroNormVector(CWRecError, ValueError):
    pass


class LayerIndexOutOfRange(CWRecError, IndexError):
    pass


class WrongNegativeCount(CWRecError, ValueError):
    pass


class EmptyGroundTruth(CWRecError, ValueError):
    pass


class NonFiniteGradient(CWRecError, FloatingPointError):
    tag = "NONFINITE"
