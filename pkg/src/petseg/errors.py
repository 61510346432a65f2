"""Exception types raised across the toolkit."""


class PetSegError(Exception):
    """Base class for every error raised by petseg."""


# NIfTI I/O


class MalformedHeader(PetSegError, ValueError):
    pass


class UnsupportedDatatype(PetSegError, ValueError):
    pass


class TruncatedData(PetSegError, ValueError):
    pass


class NotThreeDimensional(PetSegError, ValueError):
    pass


class LossyWriteRefused(PetSegError, ValueError):
    pass


class IoFailure(PetSegError, OSError):
    pass


# volumes and geometry


class NonFiniteVoxel(PetSegError, ValueError):
    pass


class ConstantVolume(PetSegError, ValueError):
    pass


class NonIntegerLabels(PetSegError, ValueError):
    pass


class ShapeMismatch(PetSegError, ValueError):
    pass


class SpacingMismatch(PetSegError, ValueError):
    pass


class BadChannelCount(PetSegError, ValueError):
    pass


class OffsetMismatch(PetSegError, ValueError):
    pass


class BadConfig(PetSegError, ValueError):
    pass


class PadFirst(PetSegError, ValueError):
    """Source volume is smaller than the requested patch; pad it with crop() first."""


# metrics and statistics


class NonBinaryMask(PetSegError, ValueError):
    pass


class EmptyList(PetSegError, ValueError):
    pass


class DuplicatePair(PetSegError, ValueError):
    pass


class StructureSetMismatch(PetSegError, ValueError):
    pass


class TooFewPairs(PetSegError, ValueError):
    pass


class AllZeroDifferences(PetSegError, ValueError):
    pass


class CaseSetMismatch(PetSegError, ValueError):
    pass


class OutOfRangePrediction(PetSegError, ValueError):
    pass


# pipeline


class MissingPrior(PetSegError, ValueError):
    pass


class GridMismatch(PetSegError, ValueError):
    pass


class SpacingDisagreement(PetSegError, ValueError):
    pass


class EmptyManifest(PetSegError, ValueError):
    pass
