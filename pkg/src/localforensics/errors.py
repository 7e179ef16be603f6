class DimensionError(ValueError):
    """Raised when tensor or image extents are incompatible with an operation."""


class ConfigError(ValueError):
    pass


class FormatError(ValueError):
    """Checkpoint or manifest content does not match the expected layout."""


class ContractError(RuntimeError):
    pass


class NonFiniteError(FloatingPointError):
    pass


class DegenerateHullError(ValueError):
    pass
