"""Exception types shared across the toolkit."""


class FormatError(ValueError):
    """A file container is malformed (bad magic, truncated header, ...)."""


class UnsupportedFormatError(ValueError):
    """A file parses but uses parameters we refuse to convert silently."""


class ManifestError(ValueError):
    """Dataset manifest construction or parsing failed."""


class DatasetError(RuntimeError):
    """The dataset cannot support the requested operation."""


class ShapeError(ValueError):
    """Tensor shapes do not conform; message names both shapes."""


class NumericError(ArithmeticError):
    """A forward value or gradient became NaN/Inf; message names the op."""


class ContractError(RuntimeError):
    """An API contract was violated (non-scalar loss, nondeterministic f, ...)."""


class CheckpointError(RuntimeError):
    """A checkpoint file is corrupt or incompatible."""


class ConfigError(ValueError):
    """A run configuration file contains unknown or invalid keys."""
