"""Exception and warning types shared across the package."""

from __future__ import annotations


class GDSError(Exception):
    """Base class for all errors raised by gdsmap."""


class DimensionMismatch(GDSError, ValueError):
    pass


class DegreeOverflow(GDSError, ValueError):
    pass


class InvalidInstance(GDSError, ValueError):
    """Instance data violates a hypothesis (zero entry, k < 2n, ...)."""

    def __init__(self, message, violations=()):
        super().__init__(message)
        self.violations = list(violations)


class RankMismatch(GDSError):
    pass


class SingularA1(GDSError):
    pass


class WrongBranch(GDSError):
    pass


class DegenerateKernel(GDSError):
    pass


class SelfCheckFailure(GDSError):
    """Two independent computations of the same quantity disagree."""


class BadSet(GDSError):
    """The centers lie in the bad set; carries the failing certificate."""

    def __init__(self, certificate):
        failing = [e.label for e in certificate.entries if not e.outside]
        super().__init__(f"centers lie in the bad set ({', '.join(failing)} = 0)")
        self.certificate = certificate
        self.failing = failing


class CertificationError(GDSError):
    def __init__(self, report):
        super().__init__("witness certification failed: " + ", ".join(report.failures))
        self.report = report


class ConditioningWarning(UserWarning):
    pass
