"""Exception hierarchy shared by every module of the package."""


class MMFusionError(Exception):
    """Base class for all package errors."""


class BadShape(MMFusionError, ValueError):
    pass


class LengthMismatch(MMFusionError, ValueError):
    pass


class ShapeMismatch(MMFusionError, ValueError):
    pass


class DivideByZero(MMFusionError, ZeroDivisionError):
    pass


class UnknownParent(MMFusionError, KeyError):
    pass


class NonScalarLoss(MMFusionError, ValueError):
    pass


class NonIntegerOutput(MMFusionError, ValueError):
    pass


class NonPositiveOutput(MMFusionError, ValueError):
    pass


class EmptySequence(MMFusionError, ValueError):
    pass


class TokenOutOfRange(MMFusionError, IndexError):
    pass


class IndivisibleImage(MMFusionError, ValueError):
    pass


class DimMismatch(MMFusionError, ValueError):
    pass


class NoActiveBranch(MMFusionError, ValueError):
    pass


class ModalityMissing(MMFusionError, ValueError):
    pass


class LabelOutOfRange(MMFusionError, IndexError):
    pass


class TooFewSamples(MMFusionError, ValueError):
    pass


class BadSpec(MMFusionError, ValueError):
    pass


class NonSquareRotate(MMFusionError, ValueError):
    pass


class FormatError(MMFusionError, IOError):
    """Base for file-format failures (truncation, bad magic, bad version)."""


class BadMagic(FormatError):
    pass


class VersionMismatch(FormatError):
    pass


class ConfigError(MMFusionError, ValueError):
    pass


class UnknownKey(ConfigError):
    pass


class ConfigTypeError(ConfigError):
    def __init__(self, key, value=None):
        self.key = key
        super().__init__(f"bad value for {key}: {value!r}")


class NumericFailure(MMFusionError, ArithmeticError):
    """Raised when training produces a non-finite loss."""
