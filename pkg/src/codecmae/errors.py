"""Exception hierarchy.

The CLI maps each family onto an exit code: configuration problems exit 2,
format and shape problems exit 3, numeric failures exit 4.
"""


class CodecMAEError(Exception):
    exit_code = 1


class ConfigError(CodecMAEError, ValueError):
    exit_code = 2


class TrainingError(ConfigError):
    """Not enough data to fit a quantizer or clustering model."""


class FormatError(CodecMAEError):
    exit_code = 3


class UnsupportedFormatError(FormatError):
    pass


class ShapeError(FormatError, ValueError):
    pass


class CorruptionError(FormatError):
    pass


class CapacityError(ShapeError):
    pass


class NumericError(CodecMAEError, ArithmeticError):
    exit_code = 4

    def __init__(self, message, *, step=None, layer=None, tensor=None):
        parts = [message]
        if step is not None:
            parts.append(f"step={step}")
        if layer is not None:
            parts.append(f"layer={layer}")
        if tensor is not None:
            parts.append(f"tensor={tensor}")
        super().__init__(" ".join(parts))
        self.step = step
        self.layer = layer
        self.tensor = tensor
