"""Exception hierarchy; each class carries the CLI exit code it maps to."""


class RiskRankError(Exception):
    exit_code = 1


class ConfigError(RiskRankError, ValueError):
    exit_code = 2


class DataError(RiskRankError, ValueError):
    exit_code = 3


class NumericError(RiskRankError, ArithmeticError):
    exit_code = 4
