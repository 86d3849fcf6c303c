class ClhmcError(Exception):
    """Base class for package errors."""


class InvalidInputError(ClhmcError, ValueError):
    pass


class DegenerateComponentError(ClhmcError):
    """A mixture component lost all of its responsibility mass."""

    def __init__(self, component, message=None):
        self.component = component
        super().__init__(message or f"mixture component {component} is degenerate")


class FitFailureError(ClhmcError):
    pass


class TrajectoryDivergenceError(ClhmcError, FloatingPointError):
    pass


class SolverError(ClhmcError):
    pass


class ModelBlowUpError(ClhmcError, FloatingPointError):
    pass


class ConfigError(ClhmcError, ValueError):
    pass


class MemberPropagationError(ClhmcError):
    def __init__(self, member, cause):
        self.member = member
        super().__init__(f"model propagation failed for member {member}: {cause}")
