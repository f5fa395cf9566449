"""Exception hierarchy.

Every error raised by the library derives from :class:`RandPoincareError`, so
callers (and the CLI) can catch one type and still report the failing stage.
"""


class RandPoincareError(Exception):
    """Base class for all library errors."""


# sde
class NonFiniteState(RandPoincareError):
    """The integrated state became NaN or infinite."""


class DomainExit(RandPoincareError):
    """A trajectory left the domain of a killed model."""


class NoCrossing(RandPoincareError):
    """No admissible section crossing was found in a path."""


class SingularDiffusion(RandPoincareError):
    """The diffusion matrix g g^T is not uniformly elliptic."""


class AssumptionViolation(RandPoincareError):
    """A model fails its transversality or ellipticity checks."""


# poincare
class Timeout(RandPoincareError):
    """A return leg exceeded the configured maximal flow time."""


class EmptyRow(RandPoincareError):
    """A kernel row received no usable samples."""


# markov
class DefectiveCluster(RandPoincareError):
    """Left and right eigenvectors of a cluster cannot be biorthonormalized."""


class EmptySet(RandPoincareError):
    """An index set is empty where a nonempty set is required."""


class NonReturning(RandPoincareError):
    """The complement-killed kernel has spectral radius 1."""


class NoGap(RandPoincareError):
    """Power iteration did not converge."""


class ZeroEigenfunction(RandPoincareError):
    """The principal right eigenfunction vanishes somewhere."""


class SingularSystem(RandPoincareError):
    """A committor or hitting-time linear system is singular."""


class LaplaceDivergence(RandPoincareError):
    """The Laplace parameter violates e^u rho(K_{A^c}) < 1."""


# metastable
class BallOverlap(RandPoincareError):
    """Two metastable balls intersect."""


class NotInvariant(RandPoincareError):
    """The deterministic return map does not send a ball into itself."""


class AmbiguousHierarchy(RandPoincareError):
    """The ordering procedure met a tie."""


class NoContraction(RandPoincareError):
    """The block-triangularization fixed point iteration diverged."""


# floquet
class NoConvergence(RandPoincareError):
    """Newton's method for a periodic orbit did not converge."""


# verify
class DegenerateFit(RandPoincareError):
    """An exponent regression has too few or degenerate points."""
