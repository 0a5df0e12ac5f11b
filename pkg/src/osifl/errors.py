"""Exception types shared across the package."""


class ConfigError(ValueError):
    """Invalid configuration value, dimension, or hyperparameter."""


class ProtocolError(RuntimeError):
    """A pipeline contract was violated at run time (empty shard,
    duplicate task, message routed to the wrong task phase, ...)."""
