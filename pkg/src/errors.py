"""
Exception hierarchy for the structure hashing engine.

Library modules raise these; the pipeline and CLI catch PoshError and turn it
into a logged one-line diagnostic.
"""


class PoshError(Exception):
    """Base class for all engine errors."""


class ConfigError(PoshError):
    """Invalid configuration file or value."""


class UsageError(PoshError):
    """Bad command-line usage."""


# Parsing
class NoChainFound(PoshError):
    pass


class ChainTooShort(PoshError):
    pass


class MalformedRecord(PoshError):
    pass


# Geometry
class DegenerateGeometry(PoshError):
    pass


class DegeneratePointSet(PoshError):
    pass


class CorrespondenceTooShort(PoshError):
    pass


class WindowOutOfRange(PoshError):
    pass


# Differentiation engine
class ShapeMismatch(PoshError):
    pass


class BatchTooSmall(PoshError):
    pass


class IndexOutOfRange(PoshError):
    pass


class EmptyInput(PoshError):
    pass


class ZeroVector(PoshError):
    pass


class GraphCycle(PoshError):
    pass


class NonFiniteValue(PoshError):
    pass


class NonFiniteGradient(PoshError):
    pass


# Sampling
class SingletonDataset(PoshError):
    pass


class NotEnoughNegatives(PoshError):
    pass


# Index and file formats
class LengthMismatch(PoshError):
    pass


class BadMagic(PoshError):
    pass


class VersionMismatch(PoshError):
    pass


class TruncatedFile(PoshError):
    pass


class ChecksumMismatch(PoshError):
    pass


# Evaluation
class EmptyDatabase(PoshError):
    pass


class DegenerateLabels(PoshError):
    pass


class NoPositives(PoshError):
    pass
