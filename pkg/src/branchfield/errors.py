"""Shared exception types."""


class CoverageError(ValueError):
    """A measure flow does not cover the requested time grid."""


class SimulationDiagnosticError(RuntimeError):
    """Non-finite state encountered during simulation; message names the
    offending tree, step and particle."""


class RiccatiBlowupError(RuntimeError):
    """Backward Riccati integration left the trust region."""


class StabilityError(RuntimeError):
    """Finite-difference scheme violates its stability restriction."""


class ConfigError(ValueError):
    """Experiment configuration failed validation."""
