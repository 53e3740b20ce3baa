"""Exception hierarchy shared by every module of the package."""


class BroadcastLabError(Exception):
    """Base class for all package errors."""


class InvalidMatrix(BroadcastLabError):
    """Matrix is not square, not row-stochastic, or has out-of-range entries."""


class NotErgodic(BroadcastLabError):
    """Chain has more than one closed communicating class."""


class AboveThreshold(BroadcastLabError):
    """max{d*lambda^2, lambda} >= 1, so epsilon is undefined."""


class DegeneratePi(BroadcastLabError):
    """Stationary distribution has a zero entry."""


class EmptyInputSet(BroadcastLabError):
    """A subset in a partition-constraint collection is empty."""


class NotCompatible(BroadcastLabError):
    """A row support straddles two parts of a partition."""


class NotIrreducible(BroadcastLabError):
    """Forward image of a partition part is empty."""


class NonTermination(BroadcastLabError):
    """The partition grid did not reach the trivial partition within the cap."""


class MeasurabilityViolation(BroadcastLabError):
    """A xi basis vector is not measurable w.r.t. the expected ancestor."""


class TooLarge(BroadcastLabError):
    """Requested object exceeds a declared size cap."""


class Extinct(BroadcastLabError):
    """Sampled branching tree has no vertex at the requested depth."""


class EmptySet(BroadcastLabError):
    """An operation that needs a non-empty set received an empty one."""


class HeightOutOfRange(BroadcastLabError):
    """Requested height is outside [0, h(u)]."""


class NodeNotInTree(BroadcastLabError):
    """A word does not address a vertex of the tree."""


class OverlappingU(BroadcastLabError):
    """Conditioning set contains a vertex strictly below another one."""


class BadDistribution(BroadcastLabError):
    """Vector is not a probability distribution of the right length."""


class TooSmall(BroadcastLabError):
    """Leaf set or multi-index has fewer than two elements."""


class BadSupport(BroadcastLabError):
    """Polynomial has a term whose decomposition root is not the expected vertex."""


class NotCentered(BroadcastLabError):
    """Polynomial has non-zero mean where a centered one is required."""


class NotDegreeOne(BroadcastLabError):
    """Polynomial has a term touching more than one vertex of the layer."""


class ZeroVariance(BroadcastLabError):
    """A ratio with a zero-variance denominator was requested."""


class ZeroLikelihood(BroadcastLabError):
    """Observation has probability zero under the model."""


class NotClosed(BroadcastLabError):
    """Set family is not closed under branch decomposition."""
