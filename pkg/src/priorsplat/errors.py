"""Exception types shared across the package."""


class PriorSplatError(Exception):
    """Base class for all package errors."""


class ShapeError(PriorSplatError, ValueError):
    """Raster dimensions do not match or are too small."""


class ParameterError(PriorSplatError, ValueError):
    """A Gaussian parameter is non-finite or otherwise invalid."""


class StaleCacheError(PriorSplatError, RuntimeError):
    """A render cache is used after the scene it came from was mutated."""


class RasterFormatError(PriorSplatError, ValueError):
    """A raster or checkpoint file has a bad magic number or header."""


class DimensionMismatchError(PriorSplatError, ValueError):
    """An ingested file does not match the expected view dimensions."""

    def __init__(self, path, expected, got):
        self.path = str(path)
        self.expected = tuple(expected)
        self.got = tuple(got)
        super().__init__(
            f"{self.path}: expected dims {self.expected}, got {self.got}"
        )


class NonFiniteError(PriorSplatError, ValueError):
    """A payload contains NaN or Inf values."""


class NonBinaryMaskError(PriorSplatError, ValueError):
    """A mask expected to be binary holds intermediate values."""


class DivergenceError(PriorSplatError, ArithmeticError):
    """Training produced a non-finite loss."""

    def __init__(self, iteration, value):
        self.iteration = int(iteration)
        self.value = value
        super().__init__(f"non-finite loss {value!r} at iteration {self.iteration}")


class ConfigError(PriorSplatError, ValueError):
    """Invalid or unknown configuration."""


class PrerequisiteError(PriorSplatError, RuntimeError):
    """A pipeline phase was started without the artifacts it needs."""
