"""Exception hierarchy shared by every module."""


class TwistotError(Exception):
    """Base class for all package errors."""


class InvalidParameter(TwistotError, ValueError):
    pass


class NotSPD(InvalidParameter):
    pass


class NoConvergence(TwistotError, RuntimeError):
    pass


class DomainError(TwistotError, ValueError):
    pass


class NotFound(TwistotError, RuntimeError):
    pass


class HypothesisViolated(TwistotError, ValueError):
    pass


class DomainTooSmall(TwistotError, ValueError):
    pass


class SupportMismatch(TwistotError, ValueError):
    pass


class CFLViolation(TwistotError, ValueError):
    pass


class SizeExceeded(TwistotError, ValueError):
    pass


class FieldMismatch(TwistotError, ValueError):
    pass


class DegenerateInput(TwistotError, ValueError):
    pass
