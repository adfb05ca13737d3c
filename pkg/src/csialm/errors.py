"""Exception hierarchy shared across the package."""


class CsiAlmError(Exception):
    """Base class for every error raised deliberately by this package."""


class DimensionError(CsiAlmError, ValueError):
    pass


class NumericError(CsiAlmError, FloatingPointError):
    pass


class ContractError(CsiAlmError, ValueError):
    pass


class ParameterError(CsiAlmError, ValueError):
    pass


class LengthError(CsiAlmError, ValueError):
    pass


class ConfigError(CsiAlmError, ValueError):
    pass
