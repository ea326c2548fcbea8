"""Exception hierarchy.

Every failure the library signals on purpose derives from ``ExactSdeError``
so callers (the CLI in particular) can separate modelling verdicts from bugs.
"""


class ExactSdeError(Exception):
    pass


class DomainExit(ExactSdeError):
    """A finite-difference stencil or flow left the admissible box."""

    def __init__(self, message, point=None):
        super().__init__(message)
        self.point = point


class NonFinite(ExactSdeError):
    pass


class NotPsd(ExactSdeError):
    pass


class SingularJacobian(ExactSdeError):
    def __init__(self, message, point=None):
        super().__init__(message)
        self.point = point


class NoSolution(ExactSdeError):
    """Least-squares solve for the generator matrix left a residual."""

    def __init__(self, message, point=None, residual=None):
        super().__init__(message)
        self.point = point
        self.residual = residual


class NotAffine(ExactSdeError):
    def __init__(self, message, point=None, residual=None):
        super().__init__(message)
        self.point = point
        self.residual = residual


class KappaDependsOnBar(ExactSdeError):
    def __init__(self, message, point=None, residual=None):
        super().__init__(message)
        self.point = point
        self.residual = residual


class NotCanonical(ExactSdeError):
    def __init__(self, message, point=None, residual=None):
        super().__init__(message)
        self.point = point
        self.residual = residual


class PermutationExhausted(ExactSdeError):
    pass


class FlowEscape(ExactSdeError):
    def __init__(self, message, point=None):
        super().__init__(message)
        self.point = point


class UnknownModel(ExactSdeError, KeyError):
    def __str__(self):
        return Exception.__str__(self)


class OdeEscape(ExactSdeError):
    pass


class NonCommutative(ExactSdeError):
    pass


class NoSurvivors(ExactSdeError):
    pass


class ConfigError(ExactSdeError):
    pass
