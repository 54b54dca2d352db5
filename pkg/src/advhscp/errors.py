"""Exception types raised across the package."""


class HscpError(Exception):
    """Base class for all package errors."""


class ShapeMismatch(HscpError, ValueError):
    pass


class DimensionMismatch(ShapeMismatch):
    pass


class ZeroVarianceNode(HscpError, ValueError):
    def __init__(self, subject, node):
        super().__init__(f"subject {subject}: node {node} has zero variance")
        self.subject = subject
        self.node = node


class NonFiniteInput(HscpError, ValueError):
    pass


class NonFiniteGradient(HscpError, FloatingPointError):
    pass


class NonFiniteLoss(HscpError, FloatingPointError):
    pass


class DegenerateLoading(HscpError, ValueError):
    pass


class InvalidSpec(HscpError, ValueError):
    pass


class InvalidParams(HscpError, ValueError):
    pass


class ZeroColumn(HscpError, ValueError):
    pass


class InsufficientSubjects(HscpError, ValueError):
    pass
