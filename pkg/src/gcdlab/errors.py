"""Exception types shared across the package.

The CLI maps these onto exit codes: ConfigError -> 2, NumericError -> 3,
MissingArtifactError -> 4.
"""


class GcdlabError(Exception):
    pass


class ConfigError(GcdlabError):
    """Bad configuration value or malformed config file."""


class ShapeError(GcdlabError):
    """Tensor shape disagrees with what an operation or record expects."""


class NumericError(GcdlabError):
    """Non-finite value produced, or a numerically invalid input."""


class CapacityError(GcdlabError):
    """A structural limit (node capacity, retry budget) was exceeded."""


class MissingArtifactError(GcdlabError):
    """An upstream pipeline artifact is absent; names the stage to run."""
