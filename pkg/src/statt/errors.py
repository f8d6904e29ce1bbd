"""Exception taxonomy shared across the package.

The CLI maps these onto process exit codes, so library code should raise
the most specific class that applies rather than bare ValueError.
"""


class StattError(Exception):
    """Base class for all package-specific errors."""


class ConfigError(StattError):
    """Invalid configuration value or config-file schema violation."""


class ShapeError(StattError):
    """Tensor dimension or dtype mismatch."""


class ContractError(StattError):
    """A caller violated an operation's precondition."""


class DataFormatError(StattError):
    """On-disk dataset or checkpoint is missing, truncated, or malformed."""


class NumericalError(StattError):
    """A numerical invariant broke (NaN/Inf in values, gradients, or loss)."""
