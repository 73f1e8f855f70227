"""Exception kinds shared across the package."""


class DynrelError(Exception):
    """Base class for all package errors."""


class ConfigurationError(DynrelError):
    """Invalid configuration value or combination."""


class DimensionError(DynrelError):
    """Array shapes inconsistent with an operation's contract."""


class SimulationError(DynrelError):
    """Numerical failure during trajectory integration."""

    def __init__(self, message, step=None):
        if step is not None:
            message = f"{message} at raw step {step}"
        super().__init__(message)
        self.step = step


class UsageError(DynrelError):
    """API or CLI misuse (bad argument combination, missing input)."""


class FormatVersionError(DynrelError):
    """Container file written by an incompatible format version."""


class TruncatedFileError(DynrelError):
    """Container file shorter than its header declares."""


class ChecksumError(DynrelError):
    """Container payload does not match its recorded checksum."""


class IngestionError(DynrelError):
    """External trajectory data violates the documented CSV schema."""

    def __init__(self, message, example_ids=()):
        ids = tuple(example_ids)
        if ids:
            message = f"{message} (examples: {', '.join(map(str, ids))})"
        super().__init__(message)
        self.example_ids = ids
