"""Join-the-Idle-Queue with multiple dispatchers: exact, fluid and simulation engines."""

__version__ = "0.1.0"

from .model import (  # noqa: E402
    FixedPointReport,
    FluidStateBlocking,
    FluidStateQueueing,
    ParameterError,
    Scenario,
    SimStats,
    SystemParams,
    make_params,
    validate,
)

__all__ = [
    "FixedPointReport",
    "FluidStateBlocking",
    "FluidStateQueueing",
    "ParameterError",
    "Scenario",
    "SimStats",
    "SystemParams",
    "make_params",
    "validate",
    "__version__",
]
