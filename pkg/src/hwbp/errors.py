"""Exception types raised across the package."""


class HwbpError(Exception):
    pass


class ShapeError(HwbpError, ValueError):
    """Array dimensions do not line up."""


class NumericError(HwbpError, ArithmeticError):
    """A non-finite value appeared where a finite one is required."""

    def __init__(self, message, index=None):
        super().__init__(message)
        self.index = index


class ContractError(HwbpError, ValueError):
    """Arguments are individually valid but inconsistent with each other."""


class CapacityError(HwbpError):
    """Request exceeds a hard size guard (e.g. path enumeration)."""


class InputError(HwbpError):
    """Bad user-provided input: file paths, config files, checkpoints."""


class DivergenceError(NumericError):
    """Training produced a non-finite loss."""
