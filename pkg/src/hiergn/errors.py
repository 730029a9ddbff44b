"""Exception types shared across the package."""


class InvalidInputError(ValueError):
    """Input violates a documented precondition."""


class SimulationOverflowError(FloatingPointError):
    """A non-finite value appeared while integrating."""


class FormatError(ValueError):
    """A file is truncated, corrupted, or has an unsupported version."""


class ConfigError(ValueError):
    """An experiment configuration is malformed or self-inconsistent."""
