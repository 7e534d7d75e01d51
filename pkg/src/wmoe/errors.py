"""Exception hierarchy shared by every module in the package."""

from __future__ import annotations


class WmoeError(Exception):
    """Base class for all package errors."""


class DimensionError(WmoeError, ValueError):
    """Operand shapes are incompatible."""


class InputError(WmoeError, ValueError):
    """An input does not satisfy an operation's precondition."""


class ContractError(WmoeError, RuntimeError):
    """An API contract was violated by the caller."""


class NumericError(WmoeError, ArithmeticError):
    """Non-finite values were encountered."""


class ConfigError(WmoeError, ValueError):
    """Invalid run configuration or model/config mismatch."""

    def __init__(self, message: str, field: str | None = None):
        super().__init__(message)
        self.field = field


class SpecError(WmoeError, ValueError):
    """Invalid synthetic family specification."""


class ProtocolError(WmoeError, ValueError):
    """Zero-shot split discipline was violated."""


class FormatError(WmoeError, ValueError):
    """A file does not match its binary or text layout."""

    def __init__(self, message: str, offset: int | None = None, path: str | None = None):
        if offset is not None:
            message = f"{message} (at byte offset {offset})"
        if path is not None:
            message = f"{path}: {message}"
        super().__init__(message)
        self.offset = offset
        self.path = path


class CorruptionError(FormatError):
    """Checksum mismatch: the file was damaged after it was written."""


class TrainingError(WmoeError, RuntimeError):
    """Training hit a non-finite loss."""

    def __init__(self, message: str, epoch: int | None = None, step: int | None = None,
                 component: str | None = None):
        self.reason = message
        ctx = []
        if epoch is not None:
            ctx.append(f"epoch={epoch}")
        if step is not None:
            ctx.append(f"step={step}")
        if component is not None:
            ctx.append(f"component={component}")
        if ctx:
            message = f"{message} [{', '.join(ctx)}]"
        super().__init__(message)
        self.epoch = epoch
        self.step = step
        self.component = component
