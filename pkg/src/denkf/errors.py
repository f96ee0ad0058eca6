"""Exception types shared across the package.

``DataError`` subclasses signal bad input data (the CLI maps them to exit
code 2); everything else derived from ``DenkfError`` is a runtime failure.
"""


class DenkfError(Exception):
    pass


class DataError(DenkfError):
    pass


# rotations
class DegenerateSixD(DenkfError, ValueError):
    pass


class GimbalDegenerate(DenkfError, ValueError):
    pass


# networks
class ShapeMismatch(DenkfError, ValueError):
    pass


class TapeMismatch(ShapeMismatch):
    pass


# filter
class InvalidEnsembleSize(DenkfError, ValueError):
    pass


class ModelShapeMismatch(ShapeMismatch):
    pass


class SingularInnovation(DenkfError, ArithmeticError):
    pass


# data
class EmptyDataset(DataError):
    pass


class InvalidConfig(DataError):
    pass


class SchemaMismatch(DataError):
    pass


class ParseError(DataError):
    pass


class NotCalibrated(DenkfError):
    pass


class EmptyInterval(DenkfError):
    pass


# wire protocol
class PacketError(DataError):
    pass


class BadMagic(PacketError):
    pass


class UnsupportedVersion(PacketError):
    pass


class BadLength(PacketError):
    pass


class NonUnitQuaternion(PacketError):
    pass
