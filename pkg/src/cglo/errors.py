"""Exception types shared across the package."""


class InvalidArgument(ValueError):
    """An argument violates an operation's precondition."""


class DegenerateInput(InvalidArgument):
    pass


class ContractViolation(RuntimeError):
    """A caller broke a documented calling protocol (e.g. a mismatched cache)."""


class NumericError(ArithmeticError):
    """Optimization produced a non-finite value."""


class IngestionError(OSError):
    """A file could not be read as a slice or sinogram."""


class ConfigError(ValueError):
    pass
