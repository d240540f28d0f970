"""Exception types shared across the package."""


class NeuroSsmError(Exception):
    """Base class for all package errors."""


class DimensionError(NeuroSsmError, ValueError):
    """Operand shapes are incompatible."""


class ContractError(NeuroSsmError, ValueError):
    """A precondition of an operation was violated."""


class GraphError(NeuroSsmError, RuntimeError):
    """Misuse of the autodiff graph (non-scalar root, repeated backward)."""


class NonFiniteError(NeuroSsmError, FloatingPointError):
    """NaN or Inf detected at an op boundary in checked mode."""


class DataError(NeuroSsmError):
    """Input data could not be ingested."""


class ParseError(DataError):
    def __init__(self, path, row, col, value):
        self.path, self.row, self.col, self.value = path, row, col, value
        super().__init__(f"{path}: row {row}, column {col}: cannot parse {value!r} as a number")


class DivergenceError(NeuroSsmError, ArithmeticError):
    """Training produced a non-finite loss."""
