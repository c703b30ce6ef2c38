"""Exception types raised across the package."""


class ContractViolation(ValueError):
    """A documented precondition on shapes, ranges or indices was broken."""


class NumericError(ArithmeticError):
    """Non-convergence or a non-finite value in a numeric routine."""


class TrainingError(RuntimeError):
    """Training produced a NaN/Inf loss."""


class ConfigError(ValueError):
    """Invalid or infeasible configuration."""


class ParseError(ValueError):
    """Malformed input file; the message carries the line number."""


class MissingArtifactError(FileNotFoundError):
    """An upstream pipeline artifact is absent."""
