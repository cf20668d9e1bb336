"""Exception hierarchy shared across the toolkit.

The CLI maps these onto exit codes: DataError -> 2, GeneratorError and
I/O failures -> 3.
"""


class ClarikitError(Exception):
    """Base class for all toolkit errors."""


class DataError(ClarikitError):
    """Malformed input data or a violated data contract."""


class GeneratorError(ClarikitError):
    """A facet generator failed or returned an invalid clarification."""


class RetriableGeneratorError(GeneratorError):
    """Transient generator failure (timeout, connection loss); safe to retry."""
