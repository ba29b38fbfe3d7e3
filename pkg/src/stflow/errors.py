"""Exception hierarchy shared across the package.

Argument/precondition violations raise plain ``ValueError``; everything that
can fail at run time for data, numerical, or training reasons gets a typed
exception so the CLI can map failures to exit-code categories.
"""


class StflowError(Exception):
    """Base class for run-time failures raised by this package."""


class DataError(StflowError):
    """Malformed or inconsistent data (files, records, split manifests)."""


class IngestionError(DataError):
    """Benchmark ingestion failed validation (counts, formats)."""


class SimulationIntegrityError(StflowError):
    """A thinning upper bound was violated during simulation."""


class IntegrationError(StflowError):
    """An ODE solve failed (step underflow, non-finite state)."""


class TrainingError(StflowError):
    """Training produced a non-finite loss or otherwise lost integrity."""
