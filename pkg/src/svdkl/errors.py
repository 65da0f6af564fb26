"""Exception hierarchy shared by every module."""


class SvdklError(Exception):
    """Base class for all library errors."""


class DimensionMismatch(SvdklError, ValueError):
    pass


class FactorizationFailed(SvdklError, ArithmeticError):
    pass


class InvalidArchitecture(SvdklError, ValueError):
    pass


class StaleTape(SvdklError, ValueError):
    pass


class EmptyDataset(SvdklError, ValueError):
    pass


class NotWarmStarted(SvdklError, RuntimeError):
    pass


class WrongBatchSize(SvdklError, ValueError):
    pass


class InvalidVarianceBounds(SvdklError, ValueError):
    pass


class OutOfRange(SvdklError, ValueError):
    pass


class DataError(SvdklError, ValueError):
    """Base for malformed dataset files."""


class ParseError(DataError):
    def __init__(self, message: str, row: int | None = None, column: int | None = None):
        where = []
        if row is not None:
            where.append(f"row {row}")
        if column is not None:
            where.append(f"column {column}")
        super().__init__(f"{message} ({', '.join(where)})" if where else message)
        self.row = row
        self.column = column


class HeaderMismatch(DataError):
    pass


class NonFiniteValue(DataError):
    pass


class VersionMismatch(SvdklError, ValueError):
    pass
