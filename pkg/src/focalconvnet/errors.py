"""Exception hierarchy. ``FocalConvError`` subclasses map to CLI exit code 1."""


class FocalConvError(Exception):
    pass


class DimensionError(FocalConvError, ValueError):
    """Operand shapes are incompatible."""


class ShapeError(FocalConvError, ValueError):
    """An op would produce a degenerate (empty) output."""


class ContractError(FocalConvError, RuntimeError):
    pass


class ConfigError(FocalConvError, ValueError):
    pass


class FormatError(FocalConvError, ValueError):
    """A serialized file is corrupt or of the wrong kind."""


class DataError(FocalConvError):
    pass


class LabelError(FocalConvError, ValueError):
    pass


class NumericError(FocalConvError, ArithmeticError):
    pass
