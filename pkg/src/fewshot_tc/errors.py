"""Exception hierarchy shared across the package.

The CLI maps these onto process exit codes (config 2, data 3, numeric 4).
"""


class FewShotError(Exception):
    """Base class for every error raised deliberately by this package."""


class ContractViolation(FewShotError):
    """A caller broke an operation's precondition (shapes, scalar-ness, ...)."""


class NumericError(FewShotError, ArithmeticError):
    """An operation produced NaN or Inf."""

    def __init__(self, op: str, detail: str = ""):
        self.op = op
        msg = f"non-finite output in op '{op}'"
        if detail:
            msg += f": {detail}"
        super().__init__(msg)


class ConfigError(FewShotError, ValueError):
    pass


class DataError(FewShotError, ValueError):
    pass


class ParseError(DataError):
    def __init__(self, path, line: int, detail: str):
        self.path = str(path)
        self.line = line
        super().__init__(f"{path}:{line}: {detail}")


class EpisodeError(DataError):
    """Raised when a split cannot supply a balanced episode."""

    def __init__(self, msg: str, label=None):
        self.label = label
        super().__init__(msg)
