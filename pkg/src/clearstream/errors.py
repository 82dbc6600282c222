"""Exception taxonomy shared across the package.

The CLI maps these onto its stable exit codes; library callers catch them
like any ValueError/RuntimeError.
"""


class ClearstreamError(Exception):
    """Base class for all package errors."""


class ShapeError(ClearstreamError, ValueError):
    """Operand dimensions do not satisfy an operation's contract."""


class ConfigError(ClearstreamError, ValueError):
    """Model or run configuration violates an invariant."""


class UsageError(ClearstreamError, ValueError):
    """API or CLI misuse (bad flag, out-of-range argument). Exit code 1."""


class CheckpointMismatchError(ClearstreamError, ValueError):
    """Checkpoint fingerprint does not match the active config. Exit code 2."""


class DataError(ClearstreamError, ValueError):
    """Missing or structurally invalid data on disk. Exit code 3."""


class PairingError(ClearstreamError, ValueError):
    """Clean/degraded clip sets cannot be paired. Exit code 4."""


class StreamError(ClearstreamError, ValueError):
    """Frame stream violated its contract (e.g. resolution change)."""


class SpecRangeError(ClearstreamError, ValueError):
    """A degradation parameter lies outside its declared range."""


class MetricError(ClearstreamError, ValueError):
    """Inputs unusable for a metric (e.g. frame smaller than the window)."""
