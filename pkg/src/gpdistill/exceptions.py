"""Exception types shared across the pipeline."""


class ParameterError(ValueError):
    """An argument is outside its valid domain."""


class MalformedInputError(ValueError):
    """A file could not be parsed."""

    def __init__(self, message, line=None, path=None):
        self.line = line
        self.path = path
        where = []
        if path is not None:
            where.append(str(path))
        if line is not None:
            where.append(f"line {line}")
        prefix = ":".join(where)
        super().__init__(f"{prefix}: {message}" if prefix else message)


class EmptyCloudError(ValueError):
    """A point cloud has no points."""


class StateError(RuntimeError):
    """An object lacks data an operation needs (e.g. normals)."""


class BehindCameraError(ValueError):
    """A point projects with non-positive depth."""


class NumericalError(ArithmeticError):
    """A factorization or conditional failed even after jitter escalation."""


class ConfigurationError(ValueError):
    """Inconsistent or unknown configuration."""


class SceneSpecError(ValueError):
    """A synthetic scene specification is invalid."""


class DataError(ValueError):
    """Pipeline inputs are present but inconsistent (missing classes, mismatched checkpoints)."""
