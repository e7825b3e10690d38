"""Exception hierarchy.

Every error raised by the library derives from :class:`TabForecastError`.
The three intermediate classes map onto CLI exit codes (config=2, data=3,
numeric=4).
"""


class TabForecastError(Exception):
    exit_code = 1


class ConfigError(TabForecastError):
    exit_code = 2


class DataError(TabForecastError):
    exit_code = 3


class NumericError(TabForecastError):
    exit_code = 4


# configuration / contract violations
class InvalidSpec(ConfigError):
    pass


class InvalidCutoff(ConfigError):
    pass


class ShapeMismatch(DataError):
    pass


class VersionMismatch(DataError):
    pass


class CorruptPayload(DataError):
    pass


# record ingestion
class MissingChannel(DataError):
    pass


class NonMonotonicTime(DataError):
    pass


class UnparseableRow(DataError):
    def __init__(self, line_no, detail):
        super().__init__(f"line {line_no}: {detail}")
        self.line_no = line_no


class MissingAbp(DataError):
    pass


# signal processing
class SignalTooShort(DataError):
    pass


class NoBeatsFound(DataError):
    pass


class TooFewCycles(DataError):
    pass


class DegenerateSignal(DataError):
    pass


# training / evaluation
class TooFewWindows(DataError):
    pass


class EmptyTestSet(DataError):
    pass


class IndexOutOfRange(DataError):
    pass


class DivergedLoss(NumericError):
    pass


class SingularNormalEquations(NumericError):
    pass
