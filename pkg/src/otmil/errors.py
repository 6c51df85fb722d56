"""Exception types shared across the package.

Invalid arguments raise plain ``ValueError``; the classes here cover
failures that need to be told apart from bad inputs.
"""


class NumericError(RuntimeError):
    """A computation produced NaN/Inf where finite values are required."""


class FormatError(ValueError):
    """A binary container or manifest is malformed or truncated."""


class ConsistencyError(ValueError):
    """Manifest and container contents disagree."""
