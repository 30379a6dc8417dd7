"""Exception hierarchy. Each family maps onto one CLI exit code."""


class CafnetError(Exception):
    exit_code = 1


class ConfigError(CafnetError, ValueError):
    exit_code = 2


class DataError(CafnetError):
    exit_code = 3


class ManifestError(DataError):
    pass


class NumericError(CafnetError, ArithmeticError):
    exit_code = 4
