"""Exception hierarchy shared by all pipeline stages."""


class RobustIcpError(Exception):
    """Base class for every error raised by this package."""


class EmptyCloud(RobustIcpError):
    """A point cloud has no points (after loading or filtering)."""


class MissingColumn(RobustIcpError):
    """A required column is absent from a CSV header."""


class ParseFailure(RobustIcpError):
    """A file could not be parsed; the message carries the line number."""


class MissingDensities(RobustIcpError):
    """An operation needs per-point densities but the cloud has none."""


class NonPositiveScale(RobustIcpError):
    """Residual scale must be strictly positive."""


class EmptyErrors(RobustIcpError):
    """A scale estimator was fed an empty error sequence."""


class UndefinedCost(RobustIcpError):
    """The requested filter kind has no cost (or influence) function."""


class SingularSystem(RobustIcpError):
    """The 6x6 normal equations are condition-deficient."""


class InsufficientMatches(RobustIcpError):
    """Fewer than six positively weighted matches reached the minimizer."""


class NoParameter(RobustIcpError):
    """The filter kind has no tunable parameter to sweep."""


class MissingBaseline(RobustIcpError):
    """Valley analysis needs L1 baseline records and none were found."""


class ConfigError(RobustIcpError):
    """A configuration file or filter spec string is invalid."""
