"""
Error hierarchy for harmnet
Every error carries a stable class name and the CLI exit code it maps to
"""
from fractions import Fraction
from typing import Optional, Sequence, Tuple


class HarmNetError(Exception):
    """Base class for every error raised by the library"""
    exit_code = 1

    @property
    def error_class(self) -> str:
        return type(self).__name__


# Usage / configuration (exit 2)

class ConfigError(HarmNetError):
    exit_code = 2


class UsageError(HarmNetError):
    exit_code = 2


class ShapeError(HarmNetError, ValueError):
    """Tensor shapes that do not fit together"""
    exit_code = 2

    def __init__(self, message: str, expected: Optional[Sequence] = None,
                 got: Optional[Sequence] = None):
        if expected is not None or got is not None:
            message = f"{message} (expected {_fmt_shape(expected)}, got {_fmt_shape(got)})"
        super().__init__(message)
        self.expected = expected
        self.got = got


class SelectionError(HarmNetError, ValueError):
    """Invalid basis size, compression level or frequency selection"""
    exit_code = 2


# Data / format (exit 3)

class DataFormatError(HarmNetError):
    exit_code = 3


class BadMagicError(DataFormatError):
    def __init__(self, path: str, expected, got):
        super().__init__(f"{path}: bad magic tag (expected {expected!r}, got {got!r})")
        self.expected = expected
        self.got = got


class TruncatedPayloadError(DataFormatError):
    def __init__(self, path: str, expected_bytes: int, available_bytes: int):
        super().__init__(
            f"{path}: truncated payload (expected {expected_bytes} bytes, "
            f"{available_bytes} available)"
        )
        self.expected_bytes = expected_bytes
        self.available_bytes = available_bytes


class ExtentMismatchError(DataFormatError):
    pass


class ManifestError(DataFormatError):
    pass


class UnsupportedLayerError(DataFormatError):
    def __init__(self, names: Sequence[str], reason: str = "unsupported layer kind"):
        super().__init__(f"{reason}: {', '.join(names)}")
        self.names = list(names)


class PlanMismatchError(DataFormatError):
    pass


class EmptyDatasetError(DataFormatError):
    pass


# Numerical failures (exit 4)

class NumericalError(HarmNetError):
    exit_code = 4


class NonFiniteError(NumericalError):
    def __init__(self, index: Tuple[int, ...], value: float):
        super().__init__(f"non-finite function value {value} at index {index}")
        self.index = index
        self.value = value


class DivergenceError(NumericalError):
    def __init__(self, epoch: int, loss: float):
        super().__init__(f"training diverged at epoch {epoch} (loss={loss})")
        self.epoch = epoch
        self.loss = loss


class NonIntegerShiftError(NumericalError):
    def __init__(self, delta: Fraction):
        super().__init__(f"shift delta={delta} is not an integer number of samples")
        self.delta = delta


class ResidualError(NumericalError):
    pass


class EquivalenceError(NumericalError):
    pass


def _fmt_shape(shape) -> str:
    if shape is None:
        return "?"
    return "x".join(str(s) for s in shape) if len(shape) else "scalar"
