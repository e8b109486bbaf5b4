"""Exception types raised across the package."""


class BalcauseError(Exception):
    """Base class for all package errors."""


class DataError(BalcauseError):
    """Problems with input data (parsing, validation, schema)."""


class MissingColumn(DataError):
    def __init__(self, column):
        super().__init__(f"missing column: {column!r}")
        self.column = column


class NonNumericCell(DataError):
    def __init__(self, row, col, value):
        super().__init__(f"non-numeric cell at row {row}, column {col!r}: {value!r}")
        self.row = row
        self.col = col


class EmptyFile(DataError):
    pass


class LevelOutOfRange(DataError):
    def __init__(self, row, value, K):
        super().__init__(f"treatment level {value} at row {row} outside 0..{K}")
        self.row = row
        self.value = value


class InvalidDataset(DataError):
    """Raised when ``validate`` finds one or more violations."""

    def __init__(self, violations):
        self.violations = list(violations)
        super().__init__("; ".join(str(v) for v in self.violations))


class DomainError(BalcauseError, ValueError):
    pass


class NonConvergence(BalcauseError):
    """Optimizer hit its iteration cap; ``result`` carries the best point found."""

    def __init__(self, message, iterations=None, grad_norm=None, result=None):
        super().__init__(message)
        self.iterations = iterations
        self.grad_norm = grad_norm
        self.result = result


class EmptyWindow(BalcauseError):
    def __init__(self, a, h):
        super().__init__(f"no treatment values within bandwidth {h:g} of {a:g}")
        self.a = a
        self.h = h


class AllWindowsEmpty(BalcauseError):
    pass


class DegenerateWeight(UserWarning):
    pass


class RankDeficientJacobian(UserWarning):
    pass


class SingularWeight(UserWarning):
    pass
