"""Exception hierarchy shared by all dislocore modules."""


class DislocoreError(Exception):
    """Base class for all errors raised by this package."""


class NotALatticeVector(DislocoreError):
    """A vector that must belong to the Bravais lattice does not."""


class DegenerateFrame(DislocoreError):
    """The requested dislocation frame cannot be constructed."""


class PeriodSearchFailed(DislocoreError):
    """No lattice vector parallel to the line direction was found."""


class Cond1Violation(DislocoreError):
    """Same-species stencil offsets fail to span the plane even after enlargement."""


class DomainTooSmall(DislocoreError):
    """The requested domain contains too few interior sites."""


class DomainEscape(DislocoreError):
    """A bond left the smooth domain of the site potential (strain blow-up)."""


class Inadmissible(DislocoreError):
    """A displacement field violates the admissibility bounds."""


class MisalignedBurgers(DislocoreError):
    """The in-plane Burgers component is not a vector of the projected lattice."""


class OutOfDomain(DislocoreError):
    """A site or a required neighbor is not stored in the domain."""


class SingularShiftHessian(DislocoreError):
    """The shift-shift block of the energy density is singular on the quotient."""


class UnstablePotential(DislocoreError):
    """A sampled dynamical-matrix eigenvalue is negative: the reference state is unstable."""


class SingularMode(DislocoreError):
    """The dynamical matrix is singular away from the known translation modes."""


class DegenerateSextic(DislocoreError):
    """The sextic eigenvalue problem is (numerically) degenerate."""


class InversionFailure(DislocoreError):
    """Newton inversion of the core regularization map failed to converge."""


class LineSearchFailure(DislocoreError):
    """The backtracking line search could not find an acceptable step."""


class NotConverged(DislocoreError):
    """An operation required a converged relaxation result."""


class EmptyWindow(DislocoreError):
    """A decay-fit window contains no usable annulus bins."""


class ConfigError(DislocoreError):
    """Invalid run configuration or command-line usage."""
