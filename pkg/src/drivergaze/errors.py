class DriverGazeError(Exception):
    pass


class ValidationError(DriverGazeError, ValueError):
    """Input violates a documented contract."""


class DegenerateLandmarksError(ValidationError):
    pass


class ManifestError(ValidationError):
    pass


class MissingFileError(ManifestError, FileNotFoundError):
    def __init__(self, path):
        super().__init__(f"missing file referenced by manifest: {path}")
        self.path = path


class GeometryError(ValidationError):
    pass


class DegenerateConfigurationError(ValidationError):
    pass


class EstimationFailedError(DriverGazeError, RuntimeError):
    pass


class PointAtInfinityError(DriverGazeError, ArithmeticError):
    pass


class TrainingError(DriverGazeError, RuntimeError):
    pass


class DegenerateBatchWarning(UserWarning):
    pass
