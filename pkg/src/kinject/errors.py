"""Shared exception types for the kinject toolkit."""


class KinjectError(Exception):
    """Base class for all toolkit errors."""


# -- knowledge triples / graphs ----------------------------------------------

class MalformedTriple(KinjectError):
    pass


class EmptyField(MalformedTriple):
    pass


class UnknownCategory(KinjectError):
    pass


class MissingCategory(KinjectError):
    pass


# -- serialized artifacts -----------------------------------------------------

class CorruptFile(KinjectError):
    pass


class DimensionMismatch(KinjectError):
    pass


# -- graph embedding ----------------------------------------------------------

class TooFewVertices(KinjectError):
    pass


# -- tensor engine ------------------------------------------------------------

class ShapeMismatch(KinjectError):
    pass


class InvalidProbability(KinjectError):
    pass


class NonScalarLoss(KinjectError):
    pass


# -- model / training ---------------------------------------------------------

class UnknownScale(KinjectError):
    pass


class ZeroVector(KinjectError):
    pass


class NoScaleEnabled(KinjectError):
    pass


class NoConvLayer(KinjectError):
    pass


# -- synthetic dataset --------------------------------------------------------

class UnsatisfiableLayout(KinjectError):
    pass


class MissingSplit(KinjectError):
    pass


class CorruptImage(KinjectError):
    pass


# -- analysis -----------------------------------------------------------------

class DegenerateCovariance(KinjectError):
    pass


# -- CLI ----------------------------------------------------------------------

class ConfigInvalid(KinjectError):
    pass
