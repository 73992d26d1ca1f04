"""
Exception hierarchy for the simulator.

Input-shaped failures also derive from ValueError so callers that only
guard against ValueError keep working.
"""


class SimulationError(Exception):
    pass


class SceneParseError(SimulationError, ValueError):
    pass


class SceneValidationError(SimulationError, ValueError):
    pass


class InvalidCellError(SimulationError, ValueError):
    pass


class ConfigError(SimulationError, ValueError):
    pass


class NoFeaturesError(SimulationError):
    pass


class ConsensusError(SimulationError):
    pass


class UndefinedOptimalError(SimulationError, ValueError):
    pass


class EmptySetError(SimulationError, ValueError):
    pass


class InfeasibleInstanceError(SimulationError):
    pass


class EmptyTraceError(SimulationError, ValueError):
    pass
