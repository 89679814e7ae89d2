"""Exception types raised across the package."""


class MixsigError(Exception):
    """Base class for all package errors."""


class NotPositiveDefinite(MixsigError):
    pass


class NotSymmetric(MixsigError):
    pass


class DimensionMismatch(MixsigError, ValueError):
    pass


class ConvergenceFailure(MixsigError):
    pass


class NonFiniteStatistic(MixsigError):
    pass


class NonFiniteElbo(MixsigError):
    pass


class NoSuccessfulRestart(MixsigError):
    pass


class ConstantRow(MixsigError, ValueError):
    pass


class RankDeficientWeights(MixsigError):
    pass


class DegenerateDeflation(MixsigError):
    pass


class ParseError(MixsigError, ValueError):
    def __init__(self, message, path=None, row=None, col=None):
        loc = []
        if path is not None:
            loc.append(str(path))
        if row is not None:
            loc.append(f"row {row}")
        if col is not None:
            loc.append(f"column {col}")
        prefix = ", ".join(loc)
        super().__init__(f"{prefix}: {message}" if prefix else message)
        self.path = path
        self.row = row
        self.col = col


class SimplexViolation(MixsigError, ValueError):
    def __init__(self, rows, message="weight rows violate the simplex constraint"):
        self.rows = list(rows)
        super().__init__(f"{message}: rows {self.rows}")


class SingleClassTruth(MixsigError, ValueError):
    pass


class ConfigError(MixsigError, ValueError):
    pass
