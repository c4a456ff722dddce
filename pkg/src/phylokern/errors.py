"""Exception hierarchy shared by the library and mapped to CLI exit codes."""


class PhylokernError(Exception):
    exit_code = 1


class DataValidationError(PhylokernError, ValueError):
    """Input data violates a format or consistency requirement."""

    exit_code = 3


class NumericalError(PhylokernError, ArithmeticError):
    """A factorization or optimisation could not produce a finite answer."""

    exit_code = 4
