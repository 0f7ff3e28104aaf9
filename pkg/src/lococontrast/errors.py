"""Exception types shared across the package."""


class ConfigError(ValueError):
    """Invalid configuration value."""


class ContractViolation(ValueError):
    """An argument broke an operation's precondition."""


class EmptyDataset(RuntimeError):
    """No usable images were found."""


class NonFiniteLoss(RuntimeError):
    """Training produced a NaN or infinite loss."""


class VersionError(RuntimeError):
    """Checkpoint was written by an incompatible format version."""


class ChecksumError(RuntimeError):
    """Checkpoint payload is truncated or corrupt."""
