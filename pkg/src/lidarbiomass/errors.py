"""Exception hierarchy shared across the pipeline.

The CLI maps these onto exit codes: ConfigError -> 2, DataError -> 3,
NumericalError -> 4. Anything else is a plain bug and propagates.
"""


class PipelineError(Exception):
    """Base class for all recoverable pipeline failures."""


class ConfigError(PipelineError):
    """Invalid or incomplete run configuration."""


class DataError(PipelineError):
    """Input data is missing, malformed, or insufficient."""


class NumericalError(PipelineError):
    """A numerical routine failed to produce a usable result."""
