"""Exception hierarchy shared across the package.

DataError maps to CLI exit code 2, NumericError to exit code 3.
"""


class ScmVaeError(Exception):
    pass


class DataError(ScmVaeError):
    """Bad dataset, config, or request contents."""


class NumericError(ScmVaeError):
    """Numerical failure: singular systems, non-finite losses, cyclic graphs."""


class SingularSystemError(NumericError):
    pass


class CyclicGraphError(NumericError):
    pass


class NonFiniteLossError(NumericError):
    pass
