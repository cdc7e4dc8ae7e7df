"""Exception types shared across the package.

The class names double as machine-readable error codes in the CLI's
error JSON, so they must stay stable.
"""


class PzPumpError(Exception):
    """Base class for all package errors."""

    @property
    def code(self) -> str:
        return type(self).__name__


# mesh generation / IO
class ChannelDegenerate(PzPumpError):
    pass


class RegionOverlap(PzPumpError):
    pass


class ResolutionTooCoarse(PzPumpError):
    pass


class SchemaError(PzPumpError):
    pass


class PeriodicityError(PzPumpError):
    pass


class TagError(PzPumpError):
    pass


class ElementInversion(PzPumpError):
    pass


# form assembly
class MissingMaterial(PzPumpError):
    pass


class QuadratureError(PzPumpError):
    pass


class EmptyFluidRegion(PzPumpError):
    pass


class DisconnectedFluidWarning(UserWarning):
    """Permeability will be rank-deficient for non-percolating pores."""


# cell problem solvers
class SingularSystem(PzPumpError):
    pass


class SolverFailure(PzPumpError):
    pass


class InfSupFailure(PzPumpError):
    pass


class IncompleteCorrectors(PzPumpError):
    pass


# sensitivity
class NonPeriodicVelocity(PzPumpError):
    pass


class ExtensionFailure(PzPumpError):
    pass


class OracleBudgetExceeded(PzPumpError):
    pass


# macro solver
class SingularElasticity(PzPumpError):
    pass


class MissingPreviousState(PzPumpError):
    pass


class NewtonDivergence(PzPumpError):
    pass


class LinearSolveFailure(PzPumpError):
    pass


class ConfigError(PzPumpError):
    pass
