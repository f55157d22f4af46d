class MilgradeError(Exception):
    """Base class; ``exit_code`` is what the CLI returns for it."""

    exit_code = 2


class UsageError(MilgradeError):
    exit_code = 1


class ContractError(MilgradeError, ValueError):
    exit_code = 2


class DimensionError(ContractError):
    pass


class DomainError(ContractError):
    pass


class DataError(MilgradeError, ValueError):
    exit_code = 2


class FormatError(DataError):
    pass


class NumericError(MilgradeError, ArithmeticError):
    exit_code = 3
