"""Exception hierarchy shared by all riemflow modules."""


class RiemflowError(Exception):
    """Base class for all riemflow errors."""


# --- geometry ---

class SingularMetric(RiemflowError):
    """Metric matrix is not positive definite at the queried (t, x)."""

    def __init__(self, t, x, msg=""):
        self.t = t
        self.x = x
        super().__init__(f"singular metric at t={t}, x={x} {msg}".rstrip())


class NotOnBoundary(RiemflowError):
    pass


class NotTangential(RiemflowError):
    pass


class ShootingNoConvergence(RiemflowError):
    pass


class DegeneratePair(RiemflowError):
    pass


class PhiBelowOne(RiemflowError):
    pass


# --- diffusion ---

class LeftChart(RiemflowError):
    pass


class HorizonExceeded(RiemflowError):
    pass


class ProjectionDiverged(RiemflowError):
    pass


# --- oracle ---

class OracleFailure(RiemflowError):
    pass


# --- derivative ---

class NestedBudgetExceeded(RiemflowError):
    pass


class DomainDegenerate(RiemflowError):
    """Localization domain does not strictly contain the start point."""


# --- coupling ---

class CouplingStalled(RiemflowError):
    pass


# --- harnack ---

class ThetaOutOfRange(RiemflowError):
    pass


class LedgerOverflow(RiemflowError):
    pass


class R0TooLarge(RiemflowError):
    pass


class PConstraintViolated(RiemflowError):
    pass


class PhiNotInD(RiemflowError):
    pass


# --- verify ---

class ExtrapolationUnstable(RiemflowError):
    pass


# --- cli ---

class CheckFailure(RiemflowError):
    """At least one verification check reported FAIL."""


class ConfigError(RiemflowError):
    pass


class RuntimeFailure(RiemflowError):
    pass
