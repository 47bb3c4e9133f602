class InfNetError(Exception):
    """Base class for all errors raised by this package."""


class ContractError(InfNetError, ValueError):
    """Shapes, strides or argument ranges violate an operation's contract."""


class ValidationError(InfNetError, ValueError):
    """Input data does not satisfy a domain invariant (e.g. non-binary mask)."""


class LoadError(InfNetError, OSError):
    """A file required by the dataset layout is missing or unreadable."""


class ConfigError(InfNetError, KeyError):
    """Unknown or malformed configuration key."""

    def __str__(self):
        return str(self.args[0]) if self.args else "invalid config"


class CheckpointError(InfNetError, OSError):
    """Writing a checkpoint failed; the previous checkpoint is left intact."""
