"""Exception hierarchy shared by every stage of the pipeline.

Each family maps to a distinct process exit code in the CLI.
"""


class QueenwatchError(Exception):
    exit_code = 1


# --- data ---------------------------------------------------------------

class DataError(QueenwatchError):
    exit_code = 3


class MissingColumn(DataError):
    def __init__(self, name):
        super().__init__(f"missing column: {name!r}")
        self.name = name


class MalformedRow(DataError):
    def __init__(self, line, reason, rejected=None):
        msg = f"line {line}: {reason}"
        if rejected:
            msg += f" ({len(rejected)} malformed rows, abort threshold exceeded)"
        super().__init__(msg)
        self.line = line
        self.reason = reason
        self.rejected = list(rejected or [])


class EmptyDataset(DataError):
    pass


class DegenerateConfig(DataError):
    pass


class SingleClass(DataError):
    pass


class TooSmall(DataError):
    pass


class ClassTooSmall(DataError):
    pass


class LengthMismatch(DataError):
    pass


# --- features -----------------------------------------------------------

class FeatureError(QueenwatchError):
    exit_code = 4


class DegenerateFeature(FeatureError):
    def __init__(self, index):
        super().__init__(f"feature {index} is constant")
        self.index = index


class DimensionMismatch(FeatureError):
    pass


class RateTooLow(FeatureError):
    pass


class EmptySignal(FeatureError):
    pass


class NonFiniteInput(FeatureError):
    pass


# --- training -----------------------------------------------------------

class TrainingError(QueenwatchError):
    exit_code = 5


class EmptySplit(TrainingError):
    pass


class EmptyForest(TrainingError):
    pass


# --- quantization / model format ---------------------------------------

class ModelError(QueenwatchError):
    exit_code = 6


class Overflow(ModelError):
    def __init__(self, kind, node):
        super().__init__(f"{kind} value at node {node} does not fit its fixed-point range")
        self.kind = kind
        self.node = node


class TooManyNodes(ModelError):
    pass


class BadMagic(ModelError):
    pass


class UnsupportedVersion(ModelError):
    pass


class TruncatedBlob(ModelError):
    pass


class CrcMismatch(ModelError):
    pass


class StructuralError(ModelError):
    pass


class CorruptModel(ModelError):
    pass


# --- wire ---------------------------------------------------------------

class WireError(QueenwatchError):
    exit_code = 7


class NonFinitePayload(WireError):
    pass


class Timeout(WireError):
    pass


class BadReply(WireError):
    pass


class TransportClosed(WireError):
    pass


# --- configuration / harness -------------------------------------------

class ConfigError(QueenwatchError):
    exit_code = 2


class ParityBelowFloor(QueenwatchError):
    exit_code = 8
