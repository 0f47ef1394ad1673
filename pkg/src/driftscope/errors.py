"""Exception taxonomy shared by all stages.

The CLI maps these onto exit codes: ConfigError -> 2, DataError (and its
subclasses) -> 3, SolverError / SimulationError -> 4.
"""


class DriftscopeError(Exception):
    """Base class for all errors raised by this package."""


class ConfigError(DriftscopeError, ValueError):
    """Invalid or inconsistent configuration."""


class DataError(DriftscopeError, ValueError):
    """Invalid input data (bad densities, mismatched grids, bad arguments)."""


class GeometryError(DataError):
    """Points or chords outside the supported geometry."""


class SolverError(DriftscopeError, RuntimeError):
    """A linear or time-stepping solver failed to converge or blew up."""


class SimulationError(DriftscopeError, RuntimeError):
    """A stochastic simulation produced non-finite states or hit a cap."""
