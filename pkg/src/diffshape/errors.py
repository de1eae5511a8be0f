"""Exception hierarchy shared by all modules."""


class ShapeError(Exception):
    """Base class for errors raised by diffshape."""


class ManifoldError(ShapeError, ValueError):
    """Invalid input to a manifold operation (non-finite data, bad shapes)."""


class CutLocusError(ManifoldError):
    """The logarithm is ill-conditioned because the points are (nearly) antipodal."""


class InjectivityError(ManifoldError):
    """A tangent vector exceeds the injectivity radius of the exponential map."""


class MeshError(ShapeError, ValueError):
    """Malformed or degenerate mesh data."""


class DegenerateFaceError(MeshError):
    def __init__(self, message, faces=()):
        super().__init__(message)
        self.faces = list(faces)


class OrientationError(MeshError):
    """A per-face Jacobian has non-positive determinant."""

    def __init__(self, message, faces=()):
        super().__init__(message)
        self.faces = list(faces)


class MeshFormatError(MeshError):
    def __init__(self, message, line=None):
        if line is not None:
            message = f"{message} (line {line})"
        super().__init__(message)
        self.line = line


class DesignError(ShapeError, ValueError):
    """Regression design is degenerate (e.g. all parameters equal)."""


class ExtrapolationError(ShapeError, ValueError):
    """Geodesic evaluated beyond the configured extrapolation cap."""


class ConvergenceError(ShapeError, RuntimeError):
    def __init__(self, message, residual=None):
        super().__init__(message)
        self.residual = residual


class ConfigError(ShapeError):
    """Bad run configuration or manifest."""
