"""Exception hierarchy shared by all cytoforge modules."""


class CytoforgeError(Exception):
    """Base class for every error raised by the package."""


class DimensionError(CytoforgeError, ValueError):
    """Array shapes or image sizes do not agree."""


class RegionError(CytoforgeError, ValueError):
    """A paste region is empty or not fully inside the canvas."""


class ConvergenceError(CytoforgeError, RuntimeError):
    """Iterative solver hit its iteration cap."""

    def __init__(self, message, residual, iterations):
        super().__init__(message)
        self.residual = residual
        self.iterations = iterations


class ManifestError(CytoforgeError, ValueError):
    """Malformed or inconsistent slide / dataset manifest."""


class FormatError(CytoforgeError, ValueError):
    """A file does not follow its on-disk format."""


class ConfigError(CytoforgeError, ValueError):
    """Invalid pipeline or training configuration."""
